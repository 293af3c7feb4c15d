"""Multimodal classifier-free guidance and the editing samplers built on it."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from . import schedules as S
from .denoiser import Conditioning, Denoiser, forward

logger = logging.getLogger(__name__)

S_I_RANGE = (1.0, 3.0)
S_T_RANGE = (2.0, 14.0)


@dataclass
class NfeCounter:
    """Denoiser evaluations per sample; a batched call on B latents counts B."""

    denoiser_calls: int = 0
    steps: int = 0

    def add(self, n=1):
        self.denoiser_calls += n

    def metrics(self):
        return {"nfe.denoiser_calls": self.denoiser_calls, "nfe.steps": self.steps}


def cfg_combine(eps_uncond, eps_img, eps_full, s_I, s_T):
    """``eps_u + s_I (eps_i - eps_u) + s_T (eps_f - eps_i)``."""
    if not (eps_uncond.shape == eps_img.shape == eps_full.shape):
        raise ValueError("guidance inputs must share a shape")
    s_I, s_T = _scale(s_I, eps_full), _scale(s_T, eps_full)
    return eps_uncond + s_I * (eps_img - eps_uncond) + s_T * (eps_full - eps_img)


def _scale(s, like):
    # per-sample scales broadcast over (C, H, W)
    if torch.is_tensor(s) and s.dim() == 1 and like.dim() > 1:
        return s.to(like.dtype).view(-1, *([1] * (like.dim() - 1)))
    return s


def _warn_extrapolation(s_I, s_T):
    for name, s, (lo, hi) in (("s_I", s_I, S_I_RANGE), ("s_T", s_T, S_T_RANGE)):
        vals = torch.as_tensor(s, dtype=torch.float64)
        if bool((vals < lo).any() or (vals > hi).any()):
            logger.warning("%s=%s outside training range [%g, %g]; extrapolating", name, s, lo, hi)


def guided_eps(model: Denoiser, x_t, t_model, cond: Conditioning, s_I, s_T, counter=None, attn=None):
    """Three-pass CFG estimate, evaluated as one batched call.

    The batch is laid out as (null, image-only, full) blocks of ``B``; an
    ``attn`` context applies to that whole 3B batch, so recorded keys and
    values come back stacked in the same order.
    """
    b = x_t.shape[0]
    null = Conditioning()
    img = Conditioning(c_I=cond.c_I)
    full = Conditioning(c_I=cond.c_I, c_T=cond.c_T)
    outs = _batched_passes(model, x_t, t_model, (null, img, full), attn)
    if counter is not None:
        counter.add(3 * b)
    return cfg_combine(outs[0], outs[1], outs[2], s_I, s_T)


def _batched_passes(model, x_t, t_model, conds, attn=None):
    from .denoiser import context_for, prepare_input

    b = x_t.shape[0]
    xs = torch.cat([prepare_input(model, x_t, c) for c in conds])
    ctx = torch.cat([context_for(model, c, b, x_t.dtype) for c in conds])
    t = torch.as_tensor(t_model, dtype=x_t.dtype)
    if t.dim() == 1:
        t = t.repeat(len(conds))
    out = model(xs, t, ctx, ctx=attn)
    return out.split(b)


def edit_multipass(
    model: Denoiser, x_T, cond: Conditioning, sched: S.NoiseSchedule, steps=None, counter=None, clip_x0=S.LATENT_CLIP
):
    """DDIM sampling with three denoiser passes per step.

    ``sched`` is the sampling schedule (e.g. a 10-step ``lcm-uniform``); the
    scales are read from ``cond``. ``clip_x0=None`` disables the x0 clamp.
    """
    if model.cfg.guidance_conditioned:
        raise ValueError("multipass guidance expects a model without guidance conditioning")
    steps = steps or sched.num_steps
    _check_steps(steps, sched, model)
    _warn_extrapolation(cond.s_I, cond.s_T)
    x = x_T
    order = list(range(steps - 1, -1, -1))
    for i, t in enumerate(order):
        eps = guided_eps(model, x, sched.model_time(t), cond, cond.s_I, cond.s_T, counter)
        x = S.sampler_step(eps, x, t, _next(order, i), sched, "ddim", clip_x0=clip_x0)
        if counter is not None:
            counter.steps += 1
    return x


def edit_distilled(
    model: Denoiser, x_T, cond: Conditioning, sched: S.NoiseSchedule, steps=None, counter=None, clip_x0=S.LATENT_CLIP
):
    """DDIM sampling with a single guidance-conditioned pass per step."""
    if not model.cfg.guidance_conditioned:
        raise ValueError("single-pass guidance needs a guidance-conditioned model")
    steps = steps or sched.num_steps
    _check_steps(steps, sched, model)
    _warn_extrapolation(cond.s_I, cond.s_T)
    x = x_T
    order = list(range(steps - 1, -1, -1))
    for i, t in enumerate(order):
        out = forward(model, x, sched.model_time(t), cond)
        if counter is not None:
            counter.add(x.shape[0])
            counter.steps += 1
        x = S.sampler_step(out, x, t, _next(order, i), sched, "ddim", clip_x0=clip_x0)
    return x


def _next(order, i):
    return order[i + 1] if i + 1 < len(order) else S.CLEAN


def _check_steps(steps, sched, model):
    if model.cfg.prediction != sched.prediction:
        raise ValueError(f"model predicts {model.cfg.prediction!r} but the schedule expects {sched.prediction!r}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps != sched.num_steps:
        raise ValueError(f"steps={steps} but the sampling schedule has {sched.num_steps}")
