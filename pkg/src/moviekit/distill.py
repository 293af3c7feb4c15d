"""Training stages: base editing model, guidance distillation, v-prediction
finetuning and adversarial single-step distillation.

All randomness comes from one ``numpy.random.Generator`` passed in by the
caller and is consumed in a fixed order per iteration, so runs are
reproducible and resumable.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from . import schedules as S
from . import synthdata
from .autoencoder import TrainingDiverged, encode
from .denoiser import Conditioning, Denoiser, context_for, forward, prepare_input, sinusoidal_embed
from .guidance import NfeCounter, S_I_RANGE, S_T_RANGE, guided_eps

logger = logging.getLogger(__name__)


class FrozenExtractorViolation(RuntimeError):
    pass


# --- data ------------------------------------------------------------------


@dataclass
class LatentData:
    """Encoded editing triplets: (source latent, edited latent, instruction id)."""

    source: torch.Tensor
    edited: torch.Tensor
    ids: np.ndarray
    contexts: torch.Tensor  # (vocab, tokens, dim) instruction embeddings

    def __len__(self):
        return self.source.shape[0]

    def batch(self, rng, size):
        idx = rng.integers(0, len(self), size)
        return self.source[idx], self.edited[idx], self.contexts[self.ids[idx]]


def instruction_table(dim=synthdata.EMBED_DIM):
    return torch.from_numpy(np.stack([synthdata.encode_instruction(i, dim) for i in sorted(synthdata.VOCAB)]))


def latent_data(pair, triplets, which="big", context_dim=synthdata.EMBED_DIM) -> LatentData:
    src = np.stack([t.source for t in triplets])
    dst = np.stack([t.edited for t in triplets])
    with torch.no_grad():
        zs = torch.cat([encode(pair, c, which) for c in np.array_split(src, max(1, len(src) // 64))])
        ze = torch.cat([encode(pair, c, which) for c in np.array_split(dst, max(1, len(dst) // 64))])
    ids = np.array([t.instruction_id for t in triplets], dtype=np.int64)
    return LatentData(zs, ze, ids, instruction_table(context_dim))


def _normal(rng, shape, like):
    return torch.from_numpy(rng.standard_normal(tuple(shape))).to(like.dtype)


def _coef(values, idx, like):
    return torch.as_tensor(values[np.asarray(idx)], dtype=like.dtype).view(-1, *([1] * (like.dim() - 1)))


def _uniform(rng, lo_hi, size, like):
    return torch.as_tensor(rng.uniform(lo_hi[0], lo_hi[1], size), dtype=like.dtype)


def _adam(params, lr, betas=(0.9, 0.999)):
    return torch.optim.Adam(params, lr=lr, betas=betas)


def _lr_schedule(opt, iters, cosine, floor=0.02):
    if not cosine or iters < 1:
        return None
    return torch.optim.lr_scheduler.CosineAnnealingLR(opt, iters, eta_min=floor * opt.param_groups[0]["lr"])


def _checked(loss, stage, it):
    if not torch.isfinite(loss):
        raise TrainingDiverged(stage, it)
    return loss


# --- stage: base editing model ----------------------------------------------


@dataclass
class BaseTrainConfig:
    iters: int = 3000
    batch: int = 32
    lr: float = 1e-3
    drop_image: float = 0.05
    drop_text: float = 0.05
    drop_both: float = 0.05


def train_base(model: Denoiser, data: LatentData, cfg: BaseTrainConfig, rng, log=None):
    """Epsilon-prediction training with per-sample conditioning dropout.

    Dropping conditions (image, text or both) gives the unconditional
    branches that multimodal guidance needs.
    """
    if model.cfg.guidance_conditioned or model.cfg.prediction != "epsilon":
        raise ValueError("the base model is an epsilon predictor without guidance inputs")
    sched = S.make_schedule("vp-linear", S.PARENT_STEPS)
    opt = _adam(model.parameters(), cfg.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.iters, 1), eta_min=cfg.lr * 0.05)
    null_ctx = context_for(model, Conditioning(), 1, torch.float32)[0]
    history = []
    for it in range(cfg.iters):
        c_I, x0, c_T = data.batch(rng, cfg.batch)
        u = rng.random(cfg.batch)
        p_i, p_t, p_b = cfg.drop_image, cfg.drop_text, cfg.drop_both
        drop_img = (u < p_i) | ((u >= p_i + p_t) & (u < p_i + p_t + p_b))
        drop_txt = (u >= p_i) & (u < p_i + p_t + p_b)
        c_I = torch.where(torch.from_numpy(drop_img)[:, None, None, None], torch.zeros_like(c_I), c_I)
        c_T = torch.where(torch.from_numpy(drop_txt)[:, None, None], null_ctx, c_T)
        t = rng.integers(0, sched.num_steps, cfg.batch)
        eps = _normal(rng, x0.shape, x0)
        x_t = _coef(sched.alphas, t, x0) * x0 + _coef(sched.sigmas, t, x0) * eps
        out = forward(model, x_t, torch.as_tensor(sched.timesteps[t], dtype=x0.dtype), Conditioning(c_I, c_T))
        loss = _checked(F.mse_loss(out, eps), "base", it)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        lr_sched.step()
        history.append(loss.item())
        if log is not None:
            log({"iter": it, "loss_total": history[-1]})
    return model, history


# --- stage: multimodal guidance distillation --------------------------------


@dataclass
class GuidanceDistillConfig:
    lam: float = 1.0
    lr: float = 1e-3
    iters: int = 2000
    batch: int = 16
    s_I_range: tuple = S_I_RANGE
    s_T_range: tuple = S_T_RANGE
    t_range: tuple = (0, S.PARENT_STEPS)
    cosine: bool = True  # cosine-decay the lr to 2% over the run

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        self.s_I_range, self.s_T_range, self.t_range = tuple(self.s_I_range), tuple(self.s_T_range), tuple(self.t_range)


@dataclass
class GuidanceProbe:
    x_t: torch.Tensor
    t: torch.Tensor
    cond: Conditioning


def _guidance_batch(data, cfg, rng, size, sched):
    # Alg. 1 draw order: condition + target, time, s_I, s_T, noise
    c_I, x0, c_T = data.batch(rng, size)
    t = rng.integers(cfg.t_range[0], cfg.t_range[1], size)
    s_I = _uniform(rng, cfg.s_I_range, size, x0)
    s_T = _uniform(rng, cfg.s_T_range, size, x0)
    eps = _normal(rng, x0.shape, x0)
    x_t = _coef(sched.alphas, t, x0) * x0 + _coef(sched.sigmas, t, x0) * eps
    return GuidanceProbe(x_t, torch.as_tensor(sched.timesteps[t], dtype=x0.dtype), Conditioning(c_I, c_T, s_I, s_T))


def make_guidance_probe(data, rng, size=64, cfg=None, scales=None):
    """Fixed probe batch; ``scales=(s_I, s_T)`` pins the guidance scales."""
    cfg = cfg or GuidanceDistillConfig()
    probe = _guidance_batch(data, cfg, rng, size, S.make_schedule("vp-linear", S.PARENT_STEPS))
    if scales is not None:
        probe.cond = probe.cond.with_scales(
            torch.full((size,), float(scales[0])), torch.full((size,), float(scales[1]))
        )
    return probe


def guidance_target(teacher, probe: GuidanceProbe, counter=None):
    with torch.no_grad():
        c = probe.cond
        return guided_eps(teacher, probe.x_t, probe.t, c, c.s_I, c.s_T, counter)


def guidance_probe_loss(teacher, student, probe: GuidanceProbe, target=None) -> float:
    """Mean squared gap between the single-pass student and the 3-pass target."""
    target = guidance_target(teacher, probe) if target is None else target
    with torch.no_grad():
        return float(F.mse_loss(forward(student, probe.x_t, probe.t, probe.cond), target))


def train_guidance_distill(teacher: Denoiser, student: Denoiser, data, cfg: GuidanceDistillConfig, rng, log=None):
    """Fit a guidance-conditioned student to the teacher's three-pass CFG output."""
    if teacher.cfg.guidance_conditioned:
        raise ValueError("teacher must not be guidance-conditioned")
    if not student.cfg.guidance_conditioned:
        raise ValueError("student must be guidance-conditioned")
    if teacher.cfg.prediction != student.cfg.prediction:
        raise ValueError(
            f"prediction mismatch: teacher {teacher.cfg.prediction!r}, student {student.cfg.prediction!r}"
        )
    sched = S.make_schedule("vp-linear", S.PARENT_STEPS)
    teacher.requires_grad_(False)
    student.requires_grad_(True)
    opt = _adam(student.parameters(), cfg.lr)
    lr_sched = _lr_schedule(opt, cfg.iters, cfg.cosine)
    history = []
    for it in range(cfg.iters):
        b = _guidance_batch(data, cfg, rng, cfg.batch, sched)
        target = guidance_target(teacher, b)
        loss = cfg.lam * F.mse_loss(forward(student, b.x_t, b.t, b.cond), target)
        _checked(loss, "guidance-distill", it)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if lr_sched is not None:
            lr_sched.step()
        history.append(loss.item())
        if log is not None:
            log({"iter": it, "loss_total": history[-1]})
    teacher.requires_grad_(True)
    return student, history


# --- stage: v-prediction finetuning ----------------------------------------


def student_schedule(levels=8, prediction="v", **kw):
    return S.make_schedule("euler-discrete", levels, prediction, **kw)


@dataclass
class VFinetuneConfig:
    iters: int = 2000
    batch: int = 16
    lr: float = 1e-4
    levels: int = 8
    s_I_range: tuple = S_I_RANGE
    s_T_range: tuple = S_T_RANGE
    schedule: S.NoiseSchedule | None = None  # overrides the euler student grid

    def resolved_schedule(self):
        return self.schedule if self.schedule is not None else student_schedule(self.levels)


@dataclass
class VProbe:
    x: torch.Tensor  # VP-space (preconditioned) input
    t: np.ndarray
    cond: Conditioning
    a: torch.Tensor
    s: torch.Tensor
    t_model: torch.Tensor


def _v_batch(data, cfg, rng, size, sched, guided):
    c_I, x0, c_T = data.batch(rng, size)
    t = S.sample_student_t(sched.num_steps, rng, size)
    cond = Conditioning(c_I, c_T)
    if guided:
        cond = cond.with_scales(_uniform(rng, cfg.s_I_range, size, x0), _uniform(rng, cfg.s_T_range, size, x0))
    eps = _normal(rng, x0.shape, x0)
    vp = np.array([sched.vp_coefficients(int(i)) for i in range(sched.num_steps)])
    a, s = _coef(vp[:, 0], t, x0), _coef(vp[:, 1], t, x0)
    t_model = torch.as_tensor(sched.timesteps[t], dtype=x0.dtype)
    return VProbe(a * x0 + s * eps, t, cond, a, s, t_model)


def make_v_probe(data, rng, size=64, cfg=None, guided=True):
    cfg = cfg or VFinetuneConfig()
    return _v_batch(data, cfg, rng, size, cfg.resolved_schedule(), guided)


def v_targets(teacher_eps, b: VProbe):
    """Teacher epsilon output re-expressed as v on the same input."""
    with torch.no_grad():
        eps = forward(teacher_eps, b.x, b.t_model, b.cond)
        x0, eps = S._to_x0_eps(eps, "epsilon", b.x, b.a, b.s)
        return S._from_x0_eps(x0, eps, "v", b.a, b.s)


def v_probe_loss(teacher_eps, student, b: VProbe) -> float:
    target = v_targets(teacher_eps, b)
    with torch.no_grad():
        return float(F.mse_loss(forward(student, b.x, b.t_model, b.cond), target))


def finetune_v_prediction(teacher_eps: Denoiser, student: Denoiser, data, cfg: VFinetuneConfig, rng, log=None):
    """Train a v-predicting student on converted teacher outputs."""
    if teacher_eps.cfg.prediction != "epsilon":
        raise ValueError("teacher must predict epsilon")
    if student.cfg.prediction != "v":
        raise ValueError("student must be flagged as a v predictor")
    if teacher_eps.cfg.guidance_conditioned != student.cfg.guidance_conditioned:
        raise ValueError("teacher and student disagree on guidance conditioning")
    sched = cfg.resolved_schedule()
    guided = student.cfg.guidance_conditioned
    teacher_eps.requires_grad_(False)
    student.requires_grad_(True)
    opt = _adam(student.parameters(), cfg.lr)
    history = []
    for it in range(cfg.iters):
        b = _v_batch(data, cfg, rng, cfg.batch, sched, guided)
        target = v_targets(teacher_eps, b)
        loss = _checked(F.mse_loss(forward(student, b.x, b.t_model, b.cond), target), "finetune-v", it)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log is not None:
            log({"iter": it, "loss_total": history[-1]})
    teacher_eps.requires_grad_(True)
    return student, history


# --- teacher sampling -------------------------------------------------------


def teacher_sample(
    teacher: Denoiser, cond: Conditioning, rng, steps=5, counter=None, shape=None, stochastic=True, clip_x0=S.LATENT_CLIP
):
    """Clean latents from ``steps`` LCM-style steps of a guidance-conditioned model.

    Each intermediate step re-noises the x0 estimate with fresh Gaussian
    noise drawn from ``rng``; ``stochastic=False`` reuses the predicted
    epsilon instead (a DDIM update). x0 estimates are clamped to
    ``+-clip_x0`` unless it is None.
    """
    if not teacher.cfg.guidance_conditioned:
        raise ValueError("teacher_sample expects a guidance-conditioned model")
    sched = S.make_schedule("lcm-uniform", steps, teacher.cfg.prediction)
    if shape is None:
        if cond.c_I is None:
            raise ValueError("need c_I or an explicit shape")
        shape = tuple(cond.c_I.shape)
    like = next(teacher.parameters())
    x = _normal(rng, shape, like)
    order = list(range(steps - 1, -1, -1))
    with torch.no_grad():
        for i, t in enumerate(order):
            out = forward(teacher, x, sched.model_time(t), cond)
            if counter is not None:
                counter.add(shape[0])
                counter.steps += 1
            t_next = order[i + 1] if i + 1 < len(order) else S.CLEAN
            noise = _normal(rng, shape, like) if stochastic and t_next != S.CLEAN else None
            x = S.sampler_step(out, x, t, t_next, sched, "lcm", noise=noise, clip_x0=clip_x0)
    return x


def student_generate(student: Denoiser, cond: Conditioning, noise, sched=None, counter=None):
    """Single-step generation from pure noise at the top student level."""
    sched = sched or student_schedule(prediction=student.cfg.prediction)
    t = sched.num_steps - 1
    a, s = sched.vp_coefficients(t)
    x_in = S.input_scale(t, sched) * (sched.sigmas[t] * noise)
    with torch.no_grad():
        out = forward(student, x_in, sched.model_time(t), cond)
    if counter is not None:
        counter.add(noise.shape[0])
        counter.steps += 1
    return S._to_x0_eps(out, sched.prediction, x_in, a, s)[0]


# --- discriminator ----------------------------------------------------------


class FeatureExtractor(nn.Module):
    """Frozen copy of a denoiser's encoder arm."""

    def __init__(self, teacher: Denoiser):
        super().__init__()
        net = copy.deepcopy(teacher)
        for name in ("up_res", "up_attn", "upsample", "norm_out", "conv_out"):
            delattr(net, name)
        net.requires_grad_(False)
        net.eval()
        self.net = net
        self.cfg = teacher.cfg

    def widths(self):
        return [self.cfg.base_channels * m for m in self.cfg.channel_multipliers]

    def forward(self, x, t_model, cond: Conditioning):
        x = prepare_input(self.net, x, cond)
        context = context_for(self.net, cond, x.shape[0], x.dtype)
        temb, gemb = self.net.embeddings(t_model, cond.s_I, cond.s_T, batch=x.shape[0], dtype=x.dtype)
        return self.net.encode(x, temb, gemb, context)


class SpatialHead(nn.Module):
    """Per-location score map from one feature level, reduced to a scalar.

    The map is ``out(h) + <h, proj(c_T)> / sqrt(hidden)`` with
    ``h = silu(conv(feat) + cond(emb))``, so the prompt enters as a
    projection term.
    """

    def __init__(self, channels, cond_dim, context_dim, hidden=32):
        super().__init__()
        self.conv = nn.Conv2d(channels, hidden, 3, padding=1)
        self.cond = nn.Linear(cond_dim, hidden)
        self.out = nn.Conv2d(hidden, 1, 1)
        self.proj = nn.Linear(context_dim, hidden)
        self.hidden = hidden

    def forward(self, feat, emb, prompt):
        h = F.silu(self.conv(feat) + self.cond(emb)[:, :, None, None])
        score = self.out(h)[:, 0] + (h * self.proj(prompt)[:, :, None, None]).sum(1) / math.sqrt(self.hidden)
        return score.mean(dim=(-1, -2))


class Discriminator(nn.Module):
    def __init__(self, teacher: Denoiser, rng, guidance_heads=True, hidden=32, schedule=None):
        super().__init__()
        if not teacher.cfg.guidance_conditioned:
            raise ValueError("the discriminator backbone comes from the guidance-distilled teacher")
        self.extractor = FeatureExtractor(teacher)
        self.guidance_heads = guidance_heads
        E = teacher.cfg.embed_dim
        cond_dim = E * (3 if guidance_heads else 1)
        self.heads = nn.ModuleList(
            SpatialHead(w, cond_dim, teacher.cfg.context_dim, hidden) for w in self.extractor.widths()
        )
        with torch.no_grad():
            for p in self.heads.parameters():
                if p.dim() == 1:
                    p.zero_()
                else:
                    bound = 1.0 / math.sqrt(int(np.prod(p.shape[1:])))
                    p.copy_(torch.from_numpy(rng.uniform(-bound, bound, p.shape).astype(np.float32)))
        self.schedule = schedule or S.make_schedule("euler-discrete", S.PARENT_STEPS, "v")
        self.extractor_checksum = checkpoint.state_checksum(self.extractor)

    def head_parameters(self):
        return list(self.heads.parameters())

    def verify_frozen(self):
        if any(p.requires_grad for p in self.extractor.parameters()):
            raise FrozenExtractorViolation("feature extractor has trainable parameters")
        now = checkpoint.state_checksum(self.extractor)
        if now != self.extractor_checksum:
            raise FrozenExtractorViolation(f"feature extractor changed: {now[:12]} != {self.extractor_checksum[:12]}")
        return now

    def embed(self, t_model, cond, batch, dtype):
        E = self.extractor.cfg.embed_dim
        parts = [_batch(t_model, batch, dtype)]
        if self.guidance_heads:
            parts += [_batch(cond.s_I, batch, dtype), _batch(cond.s_T, batch, dtype)]
        return torch.cat([sinusoidal_embed(p, E) for p in parts], dim=-1)


def _batch(v, batch, dtype):
    v = torch.as_tensor(v, dtype=dtype)
    return v.expand(batch) if v.dim() == 0 else v


def discriminator_forward(disc: Discriminator, x_noisy, cond: Conditioning, t_prime, check=True):
    """Per-sample score: mean over feature levels of each spatial head's output.

    ``x_noisy`` must already be scaled by ``c_in'``; ``t_prime`` indexes the
    discriminator schedule.
    """
    if check:
        disc.verify_frozen()
    b = x_noisy.shape[0]
    t_model = torch.as_tensor(disc.schedule.timesteps[np.asarray(t_prime)], dtype=x_noisy.dtype)
    feats = disc.extractor(x_noisy, _batch(t_model, b, x_noisy.dtype), cond)
    emb = disc.embed(t_model, cond, b, x_noisy.dtype)
    prompt = context_for(disc.extractor.net, cond, b, x_noisy.dtype).mean(dim=1)
    scores = [head(f, emb, prompt) for head, f in zip(disc.heads, feats)]
    return torch.stack(scores, dim=0).mean(dim=0)


def disc_noise(x0, t_prime, eps, sched):
    """``c_in'(t') * (x0 + sigma_t' eps)`` on the discriminator's Euler grid."""
    sig = _coef(sched.sigmas, t_prime, x0)
    return (x0 + sig * eps) / torch.sqrt(sig * sig + 1.0)


def r1_penalty(disc, x_real_noisy, cond=None, t_prime=None, create_graph=True):
    """Batch mean of ``||d score / d x||^2`` at the real noisy inputs.

    ``disc`` is a :class:`Discriminator` or any callable ``x -> score``.
    """
    x = x_real_noisy.detach().requires_grad_(True)
    score = discriminator_forward(disc, x, cond, t_prime) if isinstance(disc, Discriminator) else disc(x)
    (g,) = torch.autograd.grad(score.sum(), x, create_graph=create_graph, allow_unused=True)
    if g is None:
        return torch.zeros((), dtype=x.dtype)
    return g.pow(2).flatten(1).sum(1).mean()


# --- adversarial objective --------------------------------------------------


@dataclass
class AdversarialConfig:
    lambda_mse: float = 1.0
    lambda_gen: float = 0.5
    lambda_r1: float = 1e-4
    lr_student: float = 1e-5
    lr_disc: float = 1e-4
    betas: tuple = (0.9, 0.999)
    iters: int = 2000
    batch: int = 16
    teacher_steps: int = 5
    student_timesteps: int = 8
    disc_t_sampler: S.TimestepSamplerConfig = field(default_factory=S.TimestepSamplerConfig)
    head_guidance: bool = True
    s_I_range: tuple = S_I_RANGE
    s_T_range: tuple = S_T_RANGE

    def __post_init__(self):
        if isinstance(self.disc_t_sampler, dict):
            self.disc_t_sampler = S.TimestepSamplerConfig(**self.disc_t_sampler)
        for name in ("lambda_mse", "lambda_gen", "lambda_r1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr_student <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        self.betas = tuple(self.betas)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def disc_hinge(real_score, fake_score, r1_term, lambda_r1):
    # sign convention as written: real is pushed to <= -1, fake to >= +1
    real_score, fake_score = torch.as_tensor(real_score), torch.as_tensor(fake_score)
    return F.relu(1.0 + real_score).mean() + lambda_r1 * torch.as_tensor(r1_term) + F.relu(1.0 - fake_score).mean()


def gen_objective(fake_score, x0, x0_hat, lambda_mse, lambda_gen):
    # under the convention above, lowering the fake score moves it towards the real side
    mse = F.mse_loss(torch.as_tensor(x0_hat), torch.as_tensor(x0)) if lambda_mse else torch.zeros(())
    return lambda_mse * mse + lambda_gen * torch.as_tensor(fake_score).mean()


def adversarial_losses(real_score, fake_score, r1_term, x0, x0_hat, cfg: AdversarialConfig):
    """(disc_loss, gen_loss) for one set of scores."""
    return (
        disc_hinge(real_score, fake_score, r1_term, cfg.lambda_r1),
        gen_objective(fake_score, x0, x0_hat, cfg.lambda_mse, cfg.lambda_gen),
    )


# --- adversarial trainer ----------------------------------------------------


class AdversarialTrainer:
    """Owns the student, discriminator heads, optimizers and rng for Alg. 2 style training."""

    def __init__(self, teacher, student, disc: Discriminator, data: LatentData, cfg: AdversarialConfig, rng, log=None):
        if not teacher.cfg.guidance_conditioned:
            raise ValueError("teacher must be guidance-distilled")
        if student.cfg.prediction != "v" or not student.cfg.guidance_conditioned:
            raise ValueError("student must be a guidance-conditioned v predictor")
        if cfg.head_guidance != disc.guidance_heads:
            raise ValueError("config and discriminator disagree on head guidance conditioning")
        self.teacher, self.student, self.disc, self.data, self.cfg = teacher, student, disc, data, cfg
        self.rng, self.log = rng, log
        teacher.requires_grad_(False)
        student.requires_grad_(True)
        self.sched = student_schedule(cfg.student_timesteps, student.cfg.prediction)
        self.vp = np.array([self.sched.vp_coefficients(i) for i in range(self.sched.num_steps)])
        self.opt_s = _adam(student.parameters(), cfg.lr_student, cfg.betas)
        self.opt_d = _adam(disc.head_parameters(), cfg.lr_disc, cfg.betas)
        self.iteration = 0
        self.history = []
        self.nfe = NfeCounter()

    # one student evaluation on noised teacher samples (fresh t and eps)
    def _fake(self, x0, cond, grad):
        b = x0.shape[0]
        t = S.sample_student_t(self.sched.num_steps, self.rng, b)
        eps = _normal(self.rng, x0.shape, x0)
        a, s = _coef(self.vp[:, 0], t, x0), _coef(self.vp[:, 1], t, x0)
        x_in = a * x0 + s * eps  # c_in(t) * (x0 + sigma_t eps)
        t_model = torch.as_tensor(self.sched.timesteps[t], dtype=x0.dtype)
        with torch.set_grad_enabled(grad):
            out = forward(self.student, x_in, t_model, cond)
            return S._to_x0_eps(out, self.sched.prediction, x_in, a, s)[0]

    def _disc_draw(self, x0):
        t_p = S.sample_logit_normal_t(self.cfg.disc_t_sampler, self.rng, x0.shape[0])
        return t_p, _normal(self.rng, x0.shape, x0)

    def step(self):
        cfg, rng, disc = self.cfg, self.rng, self.disc
        checksum = disc.verify_frozen()
        c_I, _, c_T = self.data.batch(rng, cfg.batch)
        s_I = _uniform(rng, cfg.s_I_range, cfg.batch, c_I)
        s_T = _uniform(rng, cfg.s_T_range, cfg.batch, c_I)
        cond = Conditioning(c_I, c_T, s_I, s_T)
        x0 = teacher_sample(self.teacher, cond, rng, cfg.teacher_steps, self.nfe)

        # discriminator update
        x0_hat = self._fake(x0, cond, grad=False)
        t_p, eps_p = self._disc_draw(x0)
        real_in = disc_noise(x0, t_p, eps_p, disc.schedule).requires_grad_(True)
        fake_in = disc_noise(x0_hat, t_p, eps_p, disc.schedule)
        disc.heads.requires_grad_(True)
        real_score = discriminator_forward(disc, real_in, cond, t_p, check=False)
        (g,) = torch.autograd.grad(real_score.sum(), real_in, create_graph=cfg.lambda_r1 > 0)
        r1 = g.pow(2).flatten(1).sum(1).mean()
        fake_score = discriminator_forward(disc, fake_in, cond, t_p, check=False)
        loss_disc = _checked(disc_hinge(real_score, fake_score, r1, cfg.lambda_r1), "adversarial/disc", self.iteration)
        self.opt_d.zero_grad(set_to_none=True)
        loss_disc.backward()
        self.opt_d.step()

        # student update with a fresh fake and fresh noising
        disc.heads.requires_grad_(False)
        x0_hat = self._fake(x0, cond, grad=True)
        t_p, eps_p = self._disc_draw(x0)
        fake_score_g = discriminator_forward(disc, disc_noise(x0_hat, t_p, eps_p, disc.schedule), cond, t_p, check=False)
        mse = F.mse_loss(x0_hat, x0)
        loss_gen_term = fake_score_g.mean()
        loss = _checked(cfg.lambda_mse * mse + cfg.lambda_gen * loss_gen_term, "adversarial/student", self.iteration)
        self.opt_s.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_s.step()
        disc.heads.requires_grad_(True)

        rec = {
            "iter": self.iteration,
            "loss_total": loss.item(),
            "loss_mse": mse.item(),
            "loss_gen": loss_gen_term.item(),
            "loss_disc": loss_disc.item(),
            "r1": r1.item(),
            "score_real": real_score.mean().item(),
            "score_fake": fake_score.mean().item(),
            "extractor_checksum": checksum[:16],
        }
        self.history.append(rec)
        self.iteration += 1
        if self.log is not None:
            self.log(rec)
        return rec

    def run(self, iters=None):
        target = self.cfg.iters if iters is None else self.iteration + iters
        while self.iteration < target:
            self.step()
        return self.student

    # --- serialization ---
    def save(self, path):
        records = {}
        for k, v in self.student.state_dict().items():
            records[f"student/{k}"] = v
        for k, v in self.disc.heads.state_dict().items():
            records[f"heads/{k}"] = v
        groups = {}
        for tag, opt in (("opt_student", self.opt_s), ("opt_disc", self.opt_d)):
            sd = opt.state_dict()
            groups[tag] = sd["param_groups"]
            for idx, st in sd["state"].items():
                for key, val in st.items():
                    records[f"{tag}/{idx}/{key}"] = val
        header = {
            "kind": "adversarial-train-state",
            "iteration": self.iteration,
            "rng": self.rng.bit_generator.state,
            "history": self.history,
            "param_groups": groups,
            "config": self.cfg.to_dict(),
            "extractor_checksum": self.disc.extractor_checksum,
        }
        checkpoint.save_records(path, records, header)

    def load(self, path):
        header, records = checkpoint.load_records(path)
        if header.get("kind") != "adversarial-train-state":
            raise checkpoint.CheckpointError(f"{path}: not an adversarial train state")
        if header["extractor_checksum"] != self.disc.extractor_checksum:
            raise FrozenExtractorViolation("train state was made with a different feature extractor")

        def part(prefix):
            return {k[len(prefix) + 1 :]: torch.from_numpy(v) for k, v in records.items() if k.startswith(prefix + "/")}

        self.student.load_state_dict(part("student"))
        self.disc.heads.load_state_dict(part("heads"))
        for tag, opt in (("opt_student", self.opt_s), ("opt_disc", self.opt_d)):
            state = {}
            for k, v in part(tag).items():
                idx, key = k.split("/")
                state.setdefault(int(idx), {})[key] = v
            opt.load_state_dict({"state": state, "param_groups": header["param_groups"][tag]})
        self.rng.bit_generator.state = header["rng"]
        self.iteration = header["iteration"]
        self.history = header["history"]
        return header


def train_adversarial(teacher, student, disc, data, cfg: AdversarialConfig, rng, log=None):
    """Run adversarial distillation for ``cfg.iters`` iterations; returns the student."""
    trainer = AdversarialTrainer(teacher, student, disc, data, cfg, rng, log)
    trainer.run()
    return trainer.student, trainer.history


def distillation_gap(teacher, student, data: LatentData, rng, n=64, teacher_steps=5, sched=None):
    """Mean latent MSE between single-step student and multi-step teacher samples.

    Conditions (source, instruction, scales) are drawn from ``data``.
    """
    c_I, _, c_T = data.batch(rng, n)
    s_I = _uniform(rng, S_I_RANGE, n, c_I)
    s_T = _uniform(rng, S_T_RANGE, n, c_I)
    cond = Conditioning(c_I, c_T, s_I, s_T)
    x0 = teacher_sample(teacher, cond, rng, teacher_steps)
    noise = _normal(rng, c_I.shape, c_I)
    x_hat = student_generate(student, cond, noise, sched)
    return float(F.mse_loss(x_hat, x0))


# --- controllability --------------------------------------------------------


def edit_strength(model: Denoiser, c_I, c_T, noise, s_T_values, s_I=1.5, steps=10, clip_x0=S.LATENT_CLIP):
    """Latent edit magnitude ``|z - c_I|`` per condition at each text scale.

    Guidance-conditioned epsilon models are sampled with ``steps`` DDIM steps,
    v-prediction students in one step. ``noise`` is one starting latent batch
    or a list of them, in which case magnitudes are averaged over the draws.
    Returns an array (len(s_T_values), B).
    """
    from .guidance import edit_distilled

    if not model.cfg.guidance_conditioned:
        raise ValueError("edit_strength needs a guidance-conditioned model")
    noises = [noise] if torch.is_tensor(noise) else list(noise)
    sched = S.make_schedule("lcm-uniform", steps, model.cfg.prediction)
    out = np.zeros((len(s_T_values), c_I.shape[0]))
    with torch.no_grad():
        for i, s_T in enumerate(s_T_values):
            cond = Conditioning(c_I, c_T, s_I, float(s_T))
            for n in noises:
                if model.cfg.prediction == "v":
                    z = student_generate(model, cond, n)
                else:
                    z = edit_distilled(model, n, cond, sched, clip_x0=clip_x0)
                out[i] += (z - c_I).flatten(1).norm(dim=1).numpy() / len(noises)
    return out


def controllability(strengths, s_T_values):
    """Per-condition Spearman correlation of edit magnitude against s_T."""
    return np.array([spearmanr(s_T_values, col)[0] for col in np.asarray(strengths).T])
