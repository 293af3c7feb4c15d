"""Big and tiny autoencoders sharing one latent space.

Both encoders map a (B, 3, H, W) image in [0, 1] to a (B, 4, H/8, W/8)
latent. Latents are multiplied by ``latent_scale`` (fixed after the big
autoencoder is trained) so they have roughly unit variance, as the denoisers
expect.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

DOWNSAMPLE = 8
LATENT_CHANNELS = 4
BIG_WIDTHS = (32, 64, 128)
TINY_WIDTHS = (8, 16, 16)


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, iteration):
        super().__init__(f"{stage}: loss became non-finite at iteration {iteration}")
        self.stage = stage
        self.iteration = iteration


class _Res(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class _Up(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def big_encoder(widths=BIG_WIDTHS):
    layers, prev = [], 3
    for i, w in enumerate(widths):
        layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.SiLU()]
        if i > 0:
            layers += [nn.Conv2d(w, w, 3, padding=1), nn.SiLU()]
        prev = w
    layers.append(nn.Conv2d(prev, LATENT_CHANNELS, 3, padding=1))
    return nn.Sequential(*layers)


def big_decoder(widths=BIG_WIDTHS):
    w = list(reversed(widths))
    layers = [nn.Conv2d(LATENT_CHANNELS, w[0], 3, padding=1), nn.SiLU(), nn.Conv2d(w[0], w[0], 3, padding=1), nn.SiLU()]
    layers += [_Up(w[0], w[1]), nn.SiLU(), nn.Conv2d(w[1], w[1], 3, padding=1), nn.SiLU()]
    layers += [_Up(w[1], w[2]), nn.SiLU(), _Up(w[2], 3)]
    return nn.Sequential(*layers)


def tiny_encoder(widths=TINY_WIDTHS):
    layers, prev = [], 3
    for w in widths:
        layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), _Res(w)]
        prev = w
    layers.append(nn.Conv2d(prev, LATENT_CHANNELS, 3, padding=1))
    return nn.Sequential(*layers)


def tiny_decoder(widths=TINY_WIDTHS):
    w = list(reversed(widths))
    layers = [nn.Conv2d(LATENT_CHANNELS, w[0], 3, padding=1), nn.SiLU()]
    for cin, cout in zip(w, w[1:] + [w[-1]]):
        layers += [_Res(cin), _Up(cin, cout)]
    layers += [nn.SiLU(), nn.Conv2d(w[-1], 3, 3, padding=1)]
    return nn.Sequential(*layers)


class AutoencoderPair(nn.Module):
    downsample_factor = DOWNSAMPLE
    latent_channels = LATENT_CHANNELS

    def __init__(self):
        super().__init__()
        self.big_encoder = big_encoder()
        self.big_decoder = big_decoder()
        self.tiny_encoder = tiny_encoder()
        self.tiny_decoder = tiny_decoder()
        self.register_buffer("latent_scale", torch.ones(()))

    def encoder(self, which):
        return {"big": self.big_encoder, "tiny": self.tiny_encoder}[_which(which)]

    def decoder(self, which):
        return {"big": self.big_decoder, "tiny": self.tiny_decoder}[_which(which)]


def _which(which):
    if which not in ("big", "tiny"):
        raise ValueError(f"autoencoder side must be 'big' or 'tiny', not {which!r}")
    return which


def build_pair(rng: np.random.Generator) -> AutoencoderPair:
    pair = AutoencoderPair()
    with torch.no_grad():
        for name, p in pair.named_parameters():
            if p.dim() == 1:
                p.zero_()
            else:
                bound = math.sqrt(3.0 / int(np.prod(p.shape[1:])))
                p.copy_(torch.from_numpy(rng.uniform(-bound, bound, p.shape).astype(np.float32)))
    return pair


def images_to_tensor(images):
    """(H, W, 3) or (B, H, W, 3) numpy images -> (B, 3, H, W) float32 tensor."""
    if torch.is_tensor(images):
        return images if images.dim() == 4 else images[None]
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_images(x):
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1)


def encode(pair: AutoencoderPair, image, which="big"):
    """Deterministic latent of an image batch."""
    x = images_to_tensor(image)
    h, w = x.shape[-2:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ValueError(f"image dims {h}x{w} not divisible by {DOWNSAMPLE}")
    return pair.encoder(which)(x.to(pair.latent_scale.dtype)) * pair.latent_scale


def decode(pair: AutoencoderPair, latent, which="big"):
    """Image batch in [0, 1] from latents."""
    if latent.dim() == 3:
        latent = latent[None]
    if latent.shape[1] != LATENT_CHANNELS:
        raise ValueError(f"expected {LATENT_CHANNELS} latent channels, got {latent.shape[1]}")
    return _decode_raw(pair, latent, which).clamp(0.0, 1.0)


def _decode_raw(pair, latent, which):
    return pair.decoder(which)(latent / pair.latent_scale)


def psnr(a, b):
    mse = float(torch.mean((torch.as_tensor(a) - torch.as_tensor(b)) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


@dataclass
class AutoencoderTrainConfig:
    iters: int = 2000
    tiny_iters: int = 2000
    batch: int = 8
    crop: int | None = None  # full images; small crops generalize poorly here
    lr: float = 2e-3
    tiny_lr: float = 2e-3


def _batches(images, batch, iters, rng, crop):
    # optional random aligned crops; the networks are fully convolutional
    n, _, h, w = images.shape
    crop = min(crop or h, h, w)
    for _ in range(iters):
        idx = rng.integers(0, n, batch)
        oy = rng.integers(0, (h - crop) // DOWNSAMPLE + 1, batch) * DOWNSAMPLE
        ox = rng.integers(0, (w - crop) // DOWNSAMPLE + 1, batch) * DOWNSAMPLE
        yield torch.stack([images[i, :, y : y + crop, x : x + crop] for i, y, x in zip(idx, oy, ox)])


def _fit(params, loss_fn, images, iters, batch, lr, rng, stage, log, crop):
    if iters <= 0:
        return []
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, iters, eta_min=lr * 0.05)
    history = []
    for it, xb in enumerate(_batches(images, batch, iters, rng, crop)):
        loss = loss_fn(xb)
        if not torch.isfinite(loss):
            raise TrainingDiverged(stage, it)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        history.append(loss.item())
        if log is not None:
            log({"stage": stage, "iter": it, "loss": history[-1]})
    return history


def train_pair(pair: AutoencoderPair, corpus, cfg: AutoencoderTrainConfig, rng: np.random.Generator, log=None):
    """Train the big pair by reconstruction, then distill the tiny pair onto it.

    ``corpus`` is an image array (N, H, W, 3). Returns ``(pair, history)``
    where ``history`` maps stage name to per-iteration losses. The pair is
    trained in place.
    """
    images = images_to_tensor(np.asarray(corpus))
    if images.shape[0] == 0:
        raise ValueError("empty corpus")
    history = {}

    def big_loss(x):
        return F.mse_loss(pair.big_decoder(pair.big_encoder(x)), x)

    big_params = list(pair.big_encoder.parameters()) + list(pair.big_decoder.parameters())
    history["big"] = _fit(big_params, big_loss, images, cfg.iters, cfg.batch, cfg.lr, rng, "big", log, cfg.crop)
    if cfg.iters > 0:
        with torch.no_grad():
            lat = torch.cat([pair.big_encoder(c) for c in images.split(64)])
            pair.latent_scale.fill_(1.0 / float(lat.std()))

    for p in big_params:
        p.requires_grad_(False)

    def tiny_loss(x):
        with torch.no_grad():
            target = pair.big_encoder(x) * pair.latent_scale
        z_tiny = pair.tiny_encoder(x) * pair.latent_scale
        recon = pair.tiny_decoder(target / pair.latent_scale)
        return F.mse_loss(z_tiny, target) + F.mse_loss(recon, x)

    tiny_params = list(pair.tiny_encoder.parameters()) + list(pair.tiny_decoder.parameters())
    history["tiny"] = _fit(tiny_params, tiny_loss, images, cfg.tiny_iters, cfg.batch, cfg.tiny_lr, rng, "tiny", log, cfg.crop)
    for p in big_params:
        p.requires_grad_(True)
    return pair, history


def latent_gap(pair: AutoencoderPair, images) -> float:
    """Mean squared per-element gap between big and tiny encodings."""
    with torch.no_grad():
        return float(torch.mean((encode(pair, images, "big") - encode(pair, images, "tiny")) ** 2))
