"""Small conditional U-Net used as teacher, student and discriminator backbone.

The network takes the noisy latent concatenated with the source-image latent,
a time value on the 1000-step grid, an instruction token sequence for
cross-attention and, when guidance-conditioned, the two guidance scales.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import synthdata


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2)
    latent_channels: int = 4
    attention_levels: frozenset = frozenset({0, 1})
    guidance_conditioned: bool = False
    prediction: str = "epsilon"
    embed_dim: int = 64
    context_dim: int = synthdata.EMBED_DIM
    image_conditioning: bool = True
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "attention_levels", frozenset(self.attention_levels))
        levels = set(range(len(self.channel_multipliers)))
        if not self.channel_multipliers:
            raise ValueError("need at least one resolution level")
        if not self.attention_levels <= levels:
            raise ValueError(f"attention_levels {sorted(self.attention_levels)} not within levels {sorted(levels)}")
        if self.prediction not in ("epsilon", "v", "sample"):
            raise ValueError(f"unknown prediction {self.prediction!r}")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.groups:
                raise ValueError("channel widths must be divisible by groups")

    @property
    def in_channels(self):
        return self.latent_channels * (2 if self.image_conditioning else 1)

    def to_dict(self):
        d = self.__dict__.copy()
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = sorted(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Conditioning:
    """Editing conditions. ``None`` marks a null condition."""

    c_I: torch.Tensor | None = None
    c_T: torch.Tensor | None = None
    s_I: float | torch.Tensor | None = None
    s_T: float | torch.Tensor | None = None

    def with_scales(self, s_I, s_T):
        return replace(self, s_I=s_I, s_T=s_T)


@dataclass
class AttentionContext:
    """How self-attention layers get their keys and values.

    ``anchor_kv`` holds one ``{layer_name: (K, V)}`` mapping per anchor frame.
    If ``record`` is a dict, every self-attention layer stores its own
    ``(K, V)`` there, which is how anchor features are captured.
    """

    mode: str = "self"
    anchor_kv: list = field(default_factory=list)
    record: dict | None = None

    def __post_init__(self):
        if self.mode not in ("self", "cross-frame"):
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.mode == "self" and self.anchor_kv:
            raise ValueError("self mode takes no anchors")
        if self.mode == "cross-frame" and not self.anchor_kv:
            raise ValueError("cross-frame mode needs at least one anchor")


def sinusoidal_embed(value, dim: int, max_period: float = 10000.0):
    """Half sines then half cosines over geometric frequencies from 1 to 1/max_period.

    ``value`` may be a scalar or a 1-D tensor; the result has a trailing
    ``dim`` axis.
    """
    if dim < 2 or dim % 2:
        raise ValueError("embedding dim must be even and >= 2")
    half = dim // 2
    v = torch.as_tensor(value, dtype=torch.get_default_dtype() if not torch.is_tensor(value) else value.dtype)
    if not v.is_floating_point():
        v = v.to(torch.get_default_dtype())
    k = torch.arange(half, dtype=torch.float64)
    freqs = torch.exp(-math.log(max_period) * k / max(half - 1, 1)).to(v.dtype)
    args = v[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def attention(q, k, v):
    return cross_frame_attention(q, [(k, v)])


def cross_frame_attention(q, anchors):
    """``softmax(Q [K_1; ...; K_n]^T / sqrt(d)) [V_1; ...; V_n]``.

    ``q`` is (..., N, d); each anchor is a (K, V) pair of shape (..., M_i, d).
    """
    if not anchors:
        raise ValueError("cross-frame attention needs at least one anchor")
    d = q.shape[-1]
    for k, v in anchors:
        if k.shape[-1] != d or v.shape[-1] != d:
            raise ValueError("anchor key/value width differs from the query")
    k = torch.cat([a[0] for a in anchors], dim=-2) if len(anchors) > 1 else anchors[0][0]
    v = torch.cat([a[1] for a in anchors], dim=-2) if len(anchors) > 1 else anchors[0][1]
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    return w @ v


class ResBlock(nn.Module):
    def __init__(self, cin, cout, embed_dim, groups, guidance):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(embed_dim, cout)
        self.guidance = guidance
        if guidance:
            self.s_I_proj = nn.Linear(embed_dim, cout)
            self.s_T_proj = nn.Linear(embed_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb, gemb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        e = self.time_proj(F.silu(temb))
        if self.guidance:
            e_I, e_T = gemb
            e = e + F.silu(self.s_I_proj(e_I)) + F.silu(self.s_T_proj(e_T))
        h = h + e[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, dim, name):
        super().__init__()
        self.name = name
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, ctx: AttentionContext | None):
        q, k, v = self.to_q(x), self.to_k(x), self.to_v(x)
        if ctx is not None and ctx.record is not None:
            ctx.record[self.name] = (k, v)
        if ctx is not None and ctx.mode == "cross-frame":
            out = cross_frame_attention(q, [a[self.name] for a in ctx.anchor_kv])
        else:
            out = attention(q, k, v)
        return self.to_out(out)


class TextAttention(nn.Module):
    def __init__(self, dim, context_dim):
        super().__init__()
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context):
        return self.to_out(attention(self.to_q(x), self.to_k(context), self.to_v(context)))


class AttentionBlock(nn.Module):
    def __init__(self, dim, context_dim, groups, name):
        super().__init__()
        self.norm = nn.GroupNorm(groups, dim)
        self.self_attn = SelfAttention(dim, name)
        self.norm_ctx = nn.LayerNorm(dim)
        self.text_attn = TextAttention(dim, context_dim)

    def forward(self, x, context, ctx):
        b, c, hh, ww = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        delta = self.self_attn(tokens, ctx)
        delta = delta + self.text_attn(self.norm_ctx(tokens + delta), context)
        return x + delta.transpose(1, 2).reshape(b, c, hh, ww)


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * m for m in cfg.channel_multipliers]
        E, G = cfg.embed_dim, cfg.groups
        self.time_mlp = nn.Sequential(nn.Linear(E, E), nn.SiLU(), nn.Linear(E, E))
        self.conv_in = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)

        self.down_res, self.down_attn, self.downsample = nn.ModuleList(), nn.ModuleDict(), nn.ModuleList()
        prev = widths[0]
        for lvl, w in enumerate(widths):
            self.down_res.append(ResBlock(prev, w, E, G, cfg.guidance_conditioned))
            if lvl in cfg.attention_levels:
                self.down_attn[str(lvl)] = AttentionBlock(w, cfg.context_dim, G, f"down{lvl}")
            if lvl < len(widths) - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w

        self.up_res, self.up_attn, self.upsample = nn.ModuleList(), nn.ModuleDict(), nn.ModuleList()
        for lvl in reversed(range(len(widths))):
            w = widths[lvl]
            self.up_res.append(ResBlock(prev + w, w, E, G, cfg.guidance_conditioned))
            if lvl in cfg.attention_levels:
                self.up_attn[str(lvl)] = AttentionBlock(w, cfg.context_dim, G, f"up{lvl}")
            if lvl > 0:
                self.upsample.append(nn.Conv2d(w, w, 3, padding=1))
            prev = w

        self.norm_out = nn.GroupNorm(G, widths[0])
        self.conv_out = nn.Conv2d(widths[0], cfg.latent_channels, 3, padding=1)

    # encoder arm, shared with the discriminator feature extractor
    def embeddings(self, t, s_I=None, s_T=None, batch=1, dtype=None):
        dtype = dtype or self.conv_in.weight.dtype
        t = _batch_scalar(t, batch, dtype)
        temb = self.time_mlp(sinusoidal_embed(t, self.cfg.embed_dim))
        gemb = None
        if self.cfg.guidance_conditioned:
            gemb = tuple(
                sinusoidal_embed(_batch_scalar(s, batch, dtype), self.cfg.embed_dim) for s in (s_I, s_T)
            )
        return temb, gemb

    def encode(self, x, temb, gemb, context, ctx=None):
        """Run the encoder arm; returns per-level activations (before downsampling)."""
        h = self.conv_in(x)
        feats = []
        for lvl, res in enumerate(self.down_res):
            h = res(h, temb, gemb)
            if str(lvl) in self.down_attn:
                h = self.down_attn[str(lvl)](h, context, ctx)
            feats.append(h)
            if lvl < len(self.downsample):
                h = self.downsample[lvl](h)
        return feats

    def forward(self, x, t, context, s_I=None, s_T=None, ctx=None):
        temb, gemb = self.embeddings(t, s_I, s_T, batch=x.shape[0], dtype=x.dtype)
        skips = self.encode(x, temb, gemb, context, ctx)
        h = skips[-1]
        n = len(self.up_res)
        for i, res in enumerate(self.up_res):
            lvl = n - 1 - i
            h = res(torch.cat([h, skips[lvl]], dim=1), temb, gemb)
            if str(lvl) in self.up_attn:
                h = self.up_attn[str(lvl)](h, context, ctx)
            if lvl > 0:
                h = F.interpolate(h, size=skips[lvl - 1].shape[-2:], mode="nearest")
                h = self.upsample[i](h)
        return self.conv_out(F.silu(self.norm_out(h)))


def _batch_scalar(s, batch, dtype):
    s = torch.as_tensor(s, dtype=dtype)
    return s.expand(batch) if s.dim() == 0 else s


def build_denoiser(cfg: DenoiserConfig, rng: np.random.Generator) -> Denoiser:
    """Seeded initialization; guidance projections start at zero."""
    model = Denoiser(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".s_I_proj." in name or ".s_T_proj." in name:
                p.zero_()
            elif name.startswith("norm") or ".norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif p.dim() == 1:
                p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.from_numpy(rng.uniform(-bound, bound, p.shape).astype(np.float32)))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def prepare_input(model: Denoiser, x, cond: Conditioning):
    """Concatenate the image condition (zeros when null) onto ``x`` if needed."""
    cfg = model.cfg
    if x.shape[1] == cfg.in_channels:
        return x
    if x.shape[1] != cfg.latent_channels or not cfg.image_conditioning:
        raise ValueError(f"expected {cfg.latent_channels} or {cfg.in_channels} input channels, got {x.shape[1]}")
    c_I = torch.zeros_like(x) if cond.c_I is None else cond.c_I.to(x.dtype).expand_as(x)
    return torch.cat([x, c_I], dim=1)


def context_for(model: Denoiser, cond: Conditioning, batch: int, dtype):
    c_T = cond.c_T
    if c_T is None:
        c_T = torch.from_numpy(synthdata.encode_instruction(synthdata.NULL_ID, model.cfg.context_dim))
    c_T = c_T.to(dtype)
    if c_T.dim() == 2:
        c_T = c_T.expand(batch, *c_T.shape)
    return c_T


def forward(model: Denoiser, x_in, t, cond: Conditioning, attn_ctx: AttentionContext | None = None):
    """Evaluate the denoiser on ``x_in`` (batched (B, C, H, W) or a single (C, H, W))."""
    single = x_in.dim() == 3
    if single:
        x_in = x_in[None]
    cfg = model.cfg
    x_in = prepare_input(model, x_in, cond)
    has_scales = cond.s_I is not None or cond.s_T is not None
    if has_scales and not cfg.guidance_conditioned:
        raise ValueError("guidance scales given to a model without guidance conditioning")
    if cfg.guidance_conditioned and (cond.s_I is None or cond.s_T is None):
        raise ValueError("guidance-conditioned model needs both s_I and s_T")
    context = context_for(model, cond, x_in.shape[0], x_in.dtype)
    t = torch.as_tensor(t, dtype=x_in.dtype)
    out = model(x_in, t, context, cond.s_I, cond.s_T, attn_ctx)
    return out[0] if single else out


def guidance_student_from(teacher: Denoiser, **overrides) -> Denoiser:
    """Guidance-conditioned copy of ``teacher`` with zeroed guidance pathways."""
    cfg = replace(teacher.cfg, guidance_conditioned=True, **overrides)
    student = Denoiser(cfg)
    with torch.no_grad():
        for p in student.parameters():
            p.zero_()
    missing = student.load_state_dict(teacher.state_dict(), strict=False)
    if missing.unexpected_keys:
        raise ValueError(f"unexpected teacher weights: {missing.unexpected_keys}")
    return student.to(next(teacher.parameters()).dtype)


def retarget(model: Denoiser, prediction: str) -> Denoiser:
    """Copy of ``model`` that declares a different output parameterization."""
    out = copy.deepcopy(model).requires_grad_(True)
    out.cfg = replace(model.cfg, prediction=prediction)
    return out


def prune_attention(model: Denoiser, levels) -> Denoiser:
    """Copy of ``model`` without attention blocks at ``levels``."""
    levels = set(levels)
    cfg = replace(model.cfg, attention_levels=model.cfg.attention_levels - levels)
    pruned = Denoiser(cfg).to(next(model.parameters()).dtype)
    pruned.load_state_dict(model.state_dict(), strict=False)
    return pruned
