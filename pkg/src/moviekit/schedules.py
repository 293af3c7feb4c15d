"""Noise schedules, forward diffusion, prediction conversions and sampler steps.

Step index ``t = 0`` is the least noisy level of a schedule; indices grow with
noise. Every schedule also carries ``timesteps``: the value fed to the
denoiser's time embedding, expressed on the parent 1000-step VP grid so that
models trained on one schedule can be evaluated on another.

Euler-discrete schedules are variance-exploding (``alpha == 1``); their
preconditioned input ``c_in * x_t`` is the equivalent VP sample, which is what
:meth:`NoiseSchedule.vp_coefficients` describes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

logger = logging.getLogger(__name__)

KINDS = ("vp-linear", "euler-discrete", "lcm-uniform")
PREDICTIONS = ("epsilon", "v", "sample")
PARENT_STEPS = 1000
BETA_START, BETA_END = 1e-4, 2e-2
SIGMA_MIN, SIGMA_MAX = 0.1, 10.0

#: sentinel step index for the clean-data endpoint (alpha = 1, sigma = 0)
CLEAN = -1
# x0 clamp used by the multi-step samplers; corpus latents rarely leave [-4, 4]
LATENT_CLIP = 4.0


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    num_steps: int
    alphas: np.ndarray
    sigmas: np.ndarray
    prediction: str = "epsilon"
    timesteps: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.timesteps is None:
            object.__setattr__(self, "timesteps", np.arange(self.num_steps, dtype=np.float64))
        for name in ("alphas", "sigmas", "timesteps"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def coefficients(self, t: int) -> tuple[float, float]:
        """(alpha_t, sigma_t) at step ``t``; ``CLEAN`` gives (1, 0)."""
        if t == CLEAN:
            return 1.0, 0.0
        self._check(t)
        return float(self.alphas[t]), float(self.sigmas[t])

    def vp_coefficients(self, t: int) -> tuple[float, float]:
        """Coefficients of the variance-preserving sample equivalent to step ``t``."""
        a, s = self.coefficients(t)
        if self.kind == "euler-discrete":
            norm = math.sqrt(a * a + s * s)
            return a / norm, s / norm
        return a, s

    def model_time(self, t: int) -> float:
        if t == CLEAN:
            return 0.0
        self._check(t)
        return float(self.timesteps[t])

    def _check(self, t):
        if not 0 <= int(t) < self.num_steps:
            raise IndexError(f"step {t} out of range for {self.num_steps}-step schedule")

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "prediction": self.prediction,
                "num_steps": self.num_steps,
                "alphas": self.alphas.tolist(),
                "sigmas": self.sigmas.tolist(),
                "timesteps": self.timesteps.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        d = json.loads(text)
        return cls(
            kind=d["kind"],
            num_steps=d["num_steps"],
            alphas=np.array(d["alphas"]),
            sigmas=np.array(d["sigmas"]),
            prediction=d["prediction"],
            timesteps=np.array(d["timesteps"]),
        )


@dataclass(frozen=True)
class TimestepSamplerConfig:
    mean: float = -1.0
    std: float = 1.0
    num_steps: int = PARENT_STEPS

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("std must be positive")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")


def _vp_alpha_bar(n: int = PARENT_STEPS) -> np.ndarray:
    betas = np.linspace(BETA_START, BETA_END, n, dtype=np.float64)
    return np.cumprod(1.0 - betas)


def _parent_time_for_sigma(ve_sigmas: np.ndarray) -> np.ndarray:
    # interpolate in log-sigma against the VE sigmas implied by the parent VP grid
    abar = _vp_alpha_bar()
    parent = np.log(np.sqrt((1 - abar) / abar))
    return np.interp(np.log(ve_sigmas), parent, np.arange(PARENT_STEPS, dtype=np.float64))


def make_schedule(
    kind: str,
    num_steps: int,
    prediction: str = "epsilon",
    *,
    sigma_min: float = SIGMA_MIN,
    sigma_max: float = SIGMA_MAX,
) -> NoiseSchedule:
    """Build a schedule table.

    ``vp-linear`` uses a linear beta grid over ``num_steps`` steps,
    ``euler-discrete`` has log-spaced sigma levels in ``[sigma_min, sigma_max]``
    with unit alpha, and ``lcm-uniform`` picks ``num_steps`` uniformly spaced
    indices of the 1000-step VP grid, ending at its noisiest step.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if prediction not in PREDICTIONS:
        raise ValueError(f"unknown prediction type {prediction!r}")
    if int(num_steps) != num_steps or num_steps <= 0:
        raise ValueError("num_steps must be a positive integer")
    num_steps = int(num_steps)

    if kind == "vp-linear":
        abar = _vp_alpha_bar(num_steps)
        alphas, sigmas = np.sqrt(abar), np.sqrt(1.0 - abar)
        timesteps = np.arange(num_steps, dtype=np.float64) * (PARENT_STEPS / num_steps)
    elif kind == "lcm-uniform":
        if num_steps > PARENT_STEPS:
            raise ValueError("lcm-uniform cannot have more steps than the parent grid")
        idx = (np.arange(num_steps) + 1) * (PARENT_STEPS // num_steps) - 1
        abar = _vp_alpha_bar()[idx]
        alphas, sigmas = np.sqrt(abar), np.sqrt(1.0 - abar)
        timesteps = idx.astype(np.float64)
    else:
        if not 0 < sigma_min <= sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")
        if num_steps == 1:
            sigmas = np.array([sigma_max], dtype=np.float64)
        else:
            sigmas = np.exp(np.linspace(math.log(sigma_min), math.log(sigma_max), num_steps))
        alphas = np.ones(num_steps)
        timesteps = _parent_time_for_sigma(sigmas)

    return NoiseSchedule(kind, num_steps, alphas, sigmas, prediction, timesteps)


def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def add_noise(x0, eps, t: int, sched: NoiseSchedule):
    """Forward diffusion ``alpha_t * x0 + sigma_t * eps``."""
    x0, eps = _as_tensor(x0), _as_tensor(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    sched._check(t)
    a, s = sched.coefficients(t)
    return a * x0 + s * eps


def _to_x0_eps(pred, kind, x_t, a, s):
    if kind == "epsilon":
        if torch.any(torch.as_tensor(a) == 0):
            raise ZeroDivisionError("alpha_t = 0: cannot recover x0 from an epsilon prediction")
        return (x_t - s * pred) / a, pred
    if kind == "sample":
        if torch.any(torch.as_tensor(s) == 0):
            raise ZeroDivisionError("sigma_t = 0: cannot recover epsilon from a sample prediction")
        return pred, (x_t - a * pred) / s
    if kind == "v":
        # for a VP pair (a^2 + s^2 = 1): x0 = a x_t - s v, eps = s x_t + a v
        n2 = a * a + s * s
        return (a * x_t - s * pred) / n2, (s * x_t + a * pred) / n2
    raise ValueError(f"unknown prediction type {kind!r}")


def _from_x0_eps(x0, eps, kind, a, s):
    if kind == "epsilon":
        return eps
    if kind == "sample":
        return x0
    if kind == "v":
        return a * eps - s * x0
    raise ValueError(f"unknown prediction type {kind!r}")


def convert_prediction(pred, from_kind: str, to_kind: str, x_t, t: int, sched: NoiseSchedule):
    """Re-express a model output in another parameterization.

    ``x_t`` must be the VP-space sample at step ``t`` (for Euler schedules,
    the preconditioned input).
    """
    if from_kind == to_kind:
        raise ValueError("from_kind and to_kind must differ")
    a, s = sched.vp_coefficients(t)
    x0, eps = _to_x0_eps(_as_tensor(pred), from_kind, _as_tensor(x_t), a, s)
    return _from_x0_eps(x0, eps, to_kind, a, s)


def predict_x0(pred, kind: str, x_t, t: int, sched: NoiseSchedule):
    """Clean-sample estimate from a model output at step ``t`` (VP-space ``x_t``)."""
    a, s = sched.vp_coefficients(t)
    return _to_x0_eps(_as_tensor(pred), kind, _as_tensor(x_t), a, s)[0]


def input_scale(t: int, sched: NoiseSchedule) -> float:
    _, s = sched.coefficients(t)
    return 1.0 / math.sqrt(s * s + 1.0)


def precondition_input(x, t: int, sched: NoiseSchedule, variant: str = "student"):
    """Scale ``x`` by ``c_in = 1 / sqrt(sigma_t^2 + 1)``."""
    if variant not in ("student", "discriminator"):
        raise ValueError(f"unknown preconditioning variant {variant!r}")
    c = input_scale(t, sched)
    logger.debug("c_in[%s](t=%d) = %.6g", variant, t, c)
    return c * _as_tensor(x)


def sampler_step(
    model_out, x_t, t: int, t_next: int, sched: NoiseSchedule, method: str = "ddim", noise=None, clip_x0=None
):
    """Advance ``x_t`` from step ``t`` to ``t_next`` (``CLEAN`` for the final step).

    ``model_out`` is interpreted in ``sched.prediction``. For ``ddim`` and
    ``lcm`` the state is the VP sample; for ``euler`` it is the unscaled VE
    sample and the model is assumed to have seen ``c_in * x_t``.
    ``noise`` is only used by ``lcm``; without it the predicted epsilon is
    reused, which makes the update deterministic. ``clip_x0`` clamps the x0
    estimate to ``[-clip_x0, clip_x0]`` (VP samplers only) and re-derives
    epsilon from the clamped value.
    """
    if method not in ("ddim", "euler", "lcm"):
        raise ValueError(f"unknown sampler {method!r}")
    if method == "euler" and sched.kind != "euler-discrete":
        raise ValueError("euler sampler needs an euler-discrete schedule")
    if method != "euler" and sched.kind == "euler-discrete":
        raise ValueError(f"{method} sampler needs a VP schedule")
    if t_next != CLEAN and t_next >= t:
        raise ValueError("t_next must be less noisy than t")
    model_out, x_t = _as_tensor(model_out), _as_tensor(x_t)
    if model_out.shape != x_t.shape:
        raise ValueError("model output and state shapes differ")

    if method == "euler":
        c = input_scale(t, sched)
        a, s = sched.vp_coefficients(t)
        x0, _ = _to_x0_eps(model_out, sched.prediction, c * x_t, a, s)
        _, sig = sched.coefficients(t)
        _, sig_next = sched.coefficients(t_next)
        d = (x_t - x0) / sig
        return x_t + (sig_next - sig) * d

    a, s = sched.coefficients(t)
    x0, eps = _to_x0_eps(model_out, sched.prediction, x_t, a, s)
    if clip_x0 is not None:
        x0 = x0.clamp(-clip_x0, clip_x0)
        if s > 0:
            eps = (x_t - a * x0) / s
    a_next, s_next = sched.coefficients(t_next)
    if t_next == CLEAN:
        return x0
    if method == "lcm" and noise is not None:
        eps = _as_tensor(noise)
    return a_next * x0 + s_next * eps


def sample_logit_normal_t(cfg: TimestepSamplerConfig, rng: np.random.Generator, size=None):
    """Draw step indices ``round(sigmoid(u) * num_steps)`` with ``u ~ N(mean, std)``.

    Rounding (rather than flooring) keeps the degenerate ``std -> 0`` case on
    the exact level ``sigmoid(mean) * num_steps``.
    """
    u = rng.normal(cfg.mean, cfg.std, size=size)
    idx = np.rint(cfg.num_steps / (1.0 + np.exp(-u))).astype(np.int64)
    idx = np.clip(idx, 0, cfg.num_steps - 1)
    return int(idx) if size is None else idx


def sample_student_t(num_levels: int, rng: np.random.Generator, size=None):
    """Integer-uniform draw over the student's discrete levels."""
    return rng.integers(0, num_levels, size=size)
