"""Frame-by-frame video editing with the middle frame as the attention anchor.

At every denoising step the anchor frame runs first and records the keys and
values of each self-attention layer; every other frame then attends to the
anchor's keys/values instead of its own. Frames never see each other
otherwise, so cost grows linearly with the frame count.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import autoencoder as AE
from . import schedules as S
from . import synthdata
from .denoiser import AttentionContext, Conditioning, forward
from .distill import student_schedule
from .guidance import NfeCounter, _warn_extrapolation, guided_eps
from .synthdata import VideoClip

VARIANTS = ("base-multipass", "guidance-distilled", "adversarial-1step")
DEFAULT_STEPS = 10


def select_anchor(n_frames: int) -> int:
    """Middle frame; for even counts the later of the two central frames."""
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    return n_frames // 2


@dataclass
class EditRequest:
    instruction: int | str
    s_I: float = 1.5
    s_T: float = 7.5
    steps: int | None = None
    variant: str = "guidance-distilled"
    encoder: str = "big"
    decoder: str = "big"
    clip_x0: float | None = S.LATENT_CLIP

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.instruction = synthdata.instruction_id(self.instruction)
        if self.steps is None:
            self.steps = 1 if self.variant == "adversarial-1step" else DEFAULT_STEPS
        if self.variant == "adversarial-1step" and self.steps != 1:
            raise ValueError("the adversarial student runs exactly one step")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for side in (self.encoder, self.decoder):
            if side not in ("big", "tiny"):
                raise ValueError(f"autoencoder side must be big or tiny, not {side!r}")


@dataclass
class EditModels:
    """Networks for the variant in use; unused slots may stay ``None``."""

    pair: AE.AutoencoderPair
    base: torch.nn.Module | None = None
    distilled: torch.nn.Module | None = None
    student: torch.nn.Module | None = None

    def for_variant(self, variant):
        model = {"base-multipass": self.base, "guidance-distilled": self.distilled, "adversarial-1step": self.student}[
            variant
        ]
        if model is None:
            raise ValueError(f"no model loaded for variant {variant}")
        guided = model.cfg.guidance_conditioned
        if guided == (variant == "base-multipass"):
            raise ValueError(f"model guidance conditioning does not fit variant {variant}")
        if variant == "adversarial-1step" and model.cfg.prediction != "v":
            raise ValueError("the single-step student predicts v")
        return model


@dataclass
class CostCounter:
    nfe: NfeCounter = field(default_factory=NfeCounter)
    encoder_calls: int = 0
    decoder_calls: int = 0

    def metrics(self):
        return {**self.nfe.metrics(), "ae.encoder_calls": self.encoder_calls, "ae.decoder_calls": self.decoder_calls}


def _sampling_schedule(req, model):
    if req.variant == "adversarial-1step":
        return student_schedule(prediction=model.cfg.prediction)
    return S.make_schedule("lcm-uniform", req.steps, model.cfg.prediction)


def _expand_kv(record, passes, n):
    # (passes, T, d) anchor K/V -> (passes * n, T, d) matching the pass-major batch of n frames
    out = {}
    for name, (k, v) in record.items():
        out[name] = tuple(a.reshape(passes, 1, *a.shape[1:]).expand(passes, n, *a.shape[1:]).reshape(passes * n, *a.shape[1:]) for a in (k, v))
    return out


class _Stepper:
    """One denoiser evaluation of a batch of frames for the chosen variant."""

    def __init__(self, req, model, counter):
        self.req, self.model, self.counter = req, model, counter

    def __call__(self, x, t_model, c_I, c_T, attn):
        b = x.shape[0]
        if self.req.variant == "base-multipass":
            cond = Conditioning(c_I, c_T)
            return guided_eps(self.model, x, t_model, cond, self.req.s_I, self.req.s_T, self.counter, attn)
        cond = Conditioning(c_I, c_T, self.req.s_I, self.req.s_T)
        self.counter.add(b)
        return forward(self.model, x, t_model, cond, attn)

    @property
    def passes(self):
        return 3 if self.req.variant == "base-multipass" else 1


def edit_latents(latents, req: EditRequest, model, x_T, cross_frame=True, counter=None):
    """Edit a stack of source latents (N, 4, h, w) sharing initial noise ``x_T``."""
    counter = counter if counter is not None else NfeCounter()
    n = latents.shape[0]
    anchor = select_anchor(n)
    others = [i for i in range(n) if i != anchor]
    sched = _sampling_schedule(req, model)
    _warn_extrapolation(req.s_I, req.s_T)
    c_T = torch.from_numpy(synthdata.encode_instruction(req.instruction, model.cfg.context_dim)).to(latents.dtype)
    c_T = c_T.expand(1, *c_T.shape)
    step = _Stepper(req, model, counter)

    def evaluate(x, t_model):
        if not cross_frame:
            return torch.cat([step(x[i : i + 1], t_model, latents[i : i + 1], c_T, None) for i in range(n)])
        rec = {}
        out = torch.empty_like(x)
        out[anchor : anchor + 1] = step(x[anchor : anchor + 1], t_model, latents[anchor : anchor + 1], c_T, AttentionContext(record=rec))
        if others:
            ctx = AttentionContext("cross-frame", [_expand_kv(rec, step.passes, len(others))])
            out[others] = step(x[others], t_model, latents[others], c_T.expand(len(others), *c_T.shape[1:]), ctx)
        return out

    if req.variant == "adversarial-1step":
        t = sched.num_steps - 1
        a, s = sched.vp_coefficients(t)
        x_in = S.input_scale(t, sched) * (sched.sigmas[t] * x_T.expand(n, *x_T.shape[1:]))
        with torch.no_grad():
            out = evaluate(x_in, sched.model_time(t))
        counter.steps += 1
        return S._to_x0_eps(out, sched.prediction, x_in, a, s)[0]

    x = x_T.expand(n, *x_T.shape[1:]).clone()
    order = list(range(req.steps - 1, -1, -1))
    with torch.no_grad():
        for i, t in enumerate(order):
            out = evaluate(x, sched.model_time(t))
            t_next = order[i + 1] if i + 1 < len(order) else S.CLEAN
            x = S.sampler_step(out, x, t, t_next, sched, "ddim", clip_x0=req.clip_x0)
            counter.steps += 1
    return x


def edit_video(clip: VideoClip, req: EditRequest, models: EditModels, rng, cross_frame=True, counter=None):
    """Edit every frame of ``clip``; returns a clip with the same layout."""
    counter = counter if counter is not None else CostCounter()
    model = models.for_variant(req.variant)
    frames = clip.array()
    with torch.no_grad():
        latents = AE.encode(models.pair, frames, req.encoder)
    counter.encoder_calls += len(clip)
    x_T = torch.from_numpy(rng.standard_normal((1, *latents.shape[1:]))).to(latents.dtype)
    z = edit_latents(latents, req, model, x_T, cross_frame, counter.nfe)
    with torch.no_grad():
        images = AE.tensor_to_images(AE.decode(models.pair, z, req.decoder))
    counter.decoder_calls += len(clip)
    return VideoClip([f.astype(np.float64) for f in images], clip.fps)


def edit_image(image, req: EditRequest, models: EditModels, rng, counter=None):
    """Single-image editing; the reference a one-frame clip must reproduce."""
    from .guidance import edit_distilled, edit_multipass

    model = models.for_variant(req.variant)
    with torch.no_grad():
        c_I = AE.encode(models.pair, image, req.encoder)
        x_T = torch.from_numpy(rng.standard_normal(tuple(c_I.shape))).to(c_I.dtype)
        c_T = torch.from_numpy(synthdata.encode_instruction(req.instruction, model.cfg.context_dim))[None].to(c_I.dtype)
        cond = Conditioning(c_I, c_T, req.s_I, req.s_T)
        nfe = counter.nfe if counter is not None else None
        if req.variant == "adversarial-1step":
            from .distill import student_generate

            z = student_generate(model, cond, x_T, counter=nfe)
        else:
            sched = _sampling_schedule(req, model)
            fn = edit_multipass if req.variant == "base-multipass" else edit_distilled
            z = fn(model, x_T, cond, sched, req.steps, nfe, req.clip_x0)
        return AE.tensor_to_images(AE.decode(models.pair, z, req.decoder))[0].astype(np.float64)


# --- temporal consistency ---------------------------------------------------


@functools.lru_cache(maxsize=8)
def _projection(dim_in, dim_out, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((dim_out, dim_in)) / np.sqrt(dim_out)


def frame_features(frames, dim=256, seed=0):
    """Random projections of per-frame mean-centred pixels."""
    x = np.asarray(frames, dtype=np.float64).reshape(len(frames), -1)
    x = x - x.mean(axis=1, keepdims=True)
    return x @ _projection(x.shape[1], dim, seed).T


def frame_consistency(clip, dim=256, seed=0) -> float:
    """Mean cosine similarity between features of consecutive frames."""
    frames = clip.frames if isinstance(clip, VideoClip) else list(clip)
    if len(frames) < 2:
        raise ValueError("frame consistency needs at least two frames")
    f = frame_features(frames, dim, seed)
    a, b = f[:-1], f[1:]
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    cos = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return float(np.clip(cos, -1.0, 1.0).mean())


# --- clip I/O ---------------------------------------------------------------


def read_clip(path) -> VideoClip:
    """Directory of numbered PNGs, or a ``.npy`` array with a ``.json`` sidecar."""
    path = Path(path)
    if path.is_dir():
        from PIL import Image

        files = sorted(path.glob("*.png"))
        if not files:
            raise FileNotFoundError(f"no PNG frames in {path}")
        meta = path / "clip.json"
        fps = json.loads(meta.read_text()).get("fps", 8.0) if meta.exists() else 8.0
        return VideoClip([np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0 for f in files], fps)
    arr = np.load(path)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    if "dims" in meta and list(arr.shape) != list(meta["dims"]):
        raise ValueError(f"{path}: array shape {arr.shape} disagrees with sidecar dims {meta['dims']}")
    return VideoClip(list(arr.astype(np.float64)), meta.get("fps", 8.0))


def write_clip(clip: VideoClip, path):
    """Mirror of :func:`read_clip`: a ``.npy`` path writes array + sidecar, anything else a PNG directory."""
    path = Path(path)
    if path.suffix == ".npy":
        path.parent.mkdir(parents=True, exist_ok=True)
        arr = clip.array().astype(np.float32)
        np.save(path, arr)
        path.with_suffix(".json").write_text(json.dumps({"dims": list(arr.shape), "fps": clip.fps}))
        return path
    from PIL import Image

    path.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(clip.frames):
        Image.fromarray(synthdata.to_uint8(f)).save(path / f"frame_{k:04d}.png")
    (path / "clip.json").write_text(json.dumps({"frames": len(clip), "fps": clip.fps}))
    return path
