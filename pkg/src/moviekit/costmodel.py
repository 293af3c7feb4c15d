"""Static FLOP and NFE accounting.

Convention: one multiply-accumulate is 2 FLOPs; biases, norms and
nonlinearities are ignored. Attention layers count the two token-mixing
matmuls (``Q K^T`` and ``A V``) plus the q/k/v/out projections.
"""

from __future__ import annotations

import json
import math
from decimal import Decimal
from dataclasses import asdict, dataclass, field
from importlib import resources

import torch
from torch import nn

KINDS = ("conv", "linear", "attention")

VARIANT_PASSES = {
    "base-multipass": 3,
    "mobile-pruned": 3,
    "guidance-distilled": 1,
    "adversarial-1step": 1,
}


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    dims: dict
    level: int | None = None

    def flops(self) -> int:
        d = self.dims
        if self.kind == "conv":
            groups = d.get("groups", 1)
            return 2 * (d["cin"] // groups) * d["cout"] * d["k"] * d["k"] * d["h"] * d["w"]
        if self.kind == "linear":
            return 2 * d.get("tokens", 1) * d["cin"] * d["cout"]
        if self.kind == "attention":
            n, dim = d["tokens"], d["dim"]
            m = d.get("context_tokens", n)
            cdim = d.get("context_dim", dim)
            mixing = 2 * (n * m * dim + n * m * dim)
            proj = 2 * (n * dim * dim + 2 * m * cdim * dim + n * dim * dim)
            return mixing + proj
        raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class ShapeCatalog:
    name: str
    layers: list = field(default_factory=list)

    def __add__(self, other):
        return ShapeCatalog(f"{self.name}+{other.name}", self.layers + other.layers)

    def levels(self):
        return {l.level for l in self.layers if l.level is not None}

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "layers": [asdict(l) for l in self.layers]}, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["name"], [Layer(**l) for l in d["layers"]])


def flops_of(catalog: ShapeCatalog) -> float:
    """Total GFLOPs of one evaluation."""
    for l in catalog.layers:
        if l.kind not in KINDS:
            raise ValueError(f"unknown layer kind {l.kind!r} in {l.name}")
    return sum(l.flops() for l in catalog.layers) / 1e9


def prune(catalog: ShapeCatalog, levels) -> ShapeCatalog:
    """Catalog without attention layers at ``levels``."""
    levels = set(levels)
    bad = levels - catalog.levels()
    if bad:
        raise ValueError(f"levels {sorted(bad)} not present in catalog {catalog.name}")
    kept = [l for l in catalog.layers if not (l.kind == "attention" and l.level in levels)]
    return ShapeCatalog(f"{catalog.name}-pruned{sorted(levels)}", kept)


def pruning_delta(catalog: ShapeCatalog, pruned_levels) -> float:
    """Fraction of FLOPs saved by removing attention at ``pruned_levels``."""
    full = flops_of(catalog)
    return (full - flops_of(prune(catalog, pruned_levels))) / full


# --- reference UNet --------------------------------------------------------


def load_arch(name="sd15_unet"):
    return json.loads(resources.files("moviekit.data").joinpath(f"{name}.json").read_text())


def unet_catalog(arch=None, latent_size=None) -> ShapeCatalog:
    """Expand an SD-style UNet description into layer descriptors."""
    arch = arch or load_arch()
    H, W = latent_size or arch["latent_size"]
    ch = arch["block_out_channels"]
    nlev = len(ch)
    temb = arch["time_embed_dim"]
    ctx_n, ctx_d = arch["context_tokens"], arch["context_dim"]
    attn_levels = set(arch["attention_levels"])
    ff = arch["ff_mult"]
    layers = []

    sizes = [(H, W)]
    for _ in range(nlev - 1):
        h, w = sizes[-1]
        sizes.append((math.ceil(h / 2), math.ceil(w / 2)))

    def conv(name, cin, cout, k, hw, level):
        layers.append(Layer(name, "conv", {"cin": cin, "cout": cout, "k": k, "h": hw[0], "w": hw[1]}, level))

    def res(name, cin, cout, hw, level):
        conv(f"{name}.conv1", cin, cout, 3, hw, level)
        layers.append(Layer(f"{name}.time_proj", "linear", {"cin": temb, "cout": cout}, level))
        conv(f"{name}.conv2", cout, cout, 3, hw, level)
        if cin != cout:
            conv(f"{name}.skip", cin, cout, 1, hw, level)

    def transformer(name, c, hw, level):
        n = hw[0] * hw[1]
        layers.append(Layer(f"{name}.proj_in", "linear", {"tokens": n, "cin": c, "cout": c}, level))
        layers.append(Layer(f"{name}.attn1", "attention", {"tokens": n, "dim": c, "heads": arch["heads"]}, level))
        layers.append(
            Layer(
                f"{name}.attn2",
                "attention",
                {"tokens": n, "dim": c, "heads": arch["heads"], "context_tokens": ctx_n, "context_dim": ctx_d},
                level,
            )
        )
        inner = ff * c
        layers.append(Layer(f"{name}.ff_in", "linear", {"tokens": n, "cin": c, "cout": inner * (2 if arch["geglu"] else 1)}, level))
        layers.append(Layer(f"{name}.ff_out", "linear", {"tokens": n, "cin": inner, "cout": c}, level))
        layers.append(Layer(f"{name}.proj_out", "linear", {"tokens": n, "cin": c, "cout": c}, level))

    layers.append(Layer("time_embedding.linear_1", "linear", {"cin": ch[0], "cout": temb}))
    layers.append(Layer("time_embedding.linear_2", "linear", {"cin": temb, "cout": temb}))
    conv("conv_in", arch["in_channels"], ch[0], 3, sizes[0], 0)

    skips = [ch[0]]
    cur = ch[0]
    for lvl in range(nlev):
        for j in range(arch["layers_per_block"]):
            res(f"down{lvl}.res{j}", cur, ch[lvl], sizes[lvl], lvl)
            cur = ch[lvl]
            if lvl in attn_levels:
                transformer(f"down{lvl}.attn{j}", cur, sizes[lvl], lvl)
            skips.append(cur)
        if lvl < nlev - 1:
            conv(f"down{lvl}.downsample", cur, cur, 3, sizes[lvl + 1], lvl)
            skips.append(cur)

    mid = nlev - 1
    res("mid.res0", cur, cur, sizes[mid], mid)
    if arch["mid_attention"]:
        transformer("mid.attn", cur, sizes[mid], mid)
    res("mid.res1", cur, cur, sizes[mid], mid)

    for lvl in reversed(range(nlev)):
        for j in range(arch["layers_per_block"] + 1):
            skip = skips.pop()
            res(f"up{lvl}.res{j}", cur + skip, ch[lvl], sizes[lvl], lvl)
            cur = ch[lvl]
            if lvl in attn_levels:
                transformer(f"up{lvl}.attn{j}", cur, sizes[lvl], lvl)
        if lvl > 0:
            conv(f"up{lvl}.upsample", cur, cur, 3, sizes[lvl - 1], lvl)

    conv("conv_out", ch[0], arch["out_channels"], 3, sizes[0], 0)
    return ShapeCatalog(arch["name"], layers)


# --- catalogs traced from live modules -------------------------------------


def trace_catalog(module: nn.Module, run, name="traced", level_of=None) -> ShapeCatalog:
    """Record conv/linear/attention shapes while ``run()`` evaluates ``module``.

    ``level_of(qualified_name)`` maps module names to resolution levels.
    Attention modules are recognised by having ``to_q``/``to_k``/``to_v``.
    """
    layers, hooks = [], []
    names = dict(module.named_modules())
    attn_children = set()
    for qual, m in names.items():
        if all(hasattr(m, a) for a in ("to_q", "to_k", "to_v", "to_out")):
            attn_children.update(f"{qual}.{c}" for c in ("to_q", "to_k", "to_v", "to_out"))

    def lvl(q):
        return level_of(q) if level_of else None

    def conv_hook(qual):
        def hook(m, inp, out):
            layers.append(
                Layer(qual, "conv", {"cin": m.in_channels, "cout": m.out_channels, "k": m.kernel_size[0],
                                     "h": out.shape[-2], "w": out.shape[-1], "groups": m.groups}, lvl(qual))
            )
        return hook

    def linear_hook(qual):
        def hook(m, inp, out):
            tokens = inp[0].numel() // inp[0].shape[-1] // max(inp[0].shape[0], 1) if inp[0].dim() > 2 else 1
            layers.append(Layer(qual, "linear", {"cin": m.in_features, "cout": m.out_features, "tokens": tokens}, lvl(qual)))
        return hook

    def attn_hook(qual):
        def hook(m, args, out):
            x = args[0]
            n, dim = x.shape[-2], m.to_q.out_features
            context = args[1] if len(args) > 1 and torch.is_tensor(args[1]) else None
            dims = {"tokens": n, "dim": dim}
            if context is not None:
                dims.update(context_tokens=context.shape[-2], context_dim=context.shape[-1])
            layers.append(Layer(qual, "attention", dims, lvl(qual)))
        return hook

    for qual, m in names.items():
        if qual in attn_children:
            continue
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook(qual)))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(linear_hook(qual)))
        elif all(hasattr(m, a) for a in ("to_q", "to_k", "to_v", "to_out")):
            hooks.append(m.register_forward_hook(attn_hook(qual)))
    try:
        with torch.no_grad():
            run()
    finally:
        for h in hooks:
            h.remove()
    return ShapeCatalog(name, layers)


def denoiser_catalog(model, latent_hw=(8, 8)) -> ShapeCatalog:
    """Per-sample catalog of a toy :class:`~moviekit.denoiser.Denoiser`."""
    from .denoiser import Conditioning, forward

    cfg = model.cfg
    x = torch.zeros(1, cfg.in_channels, *latent_hw, dtype=next(model.parameters()).dtype)
    cond = Conditioning(s_I=1.0, s_T=1.0) if cfg.guidance_conditioned else Conditioning()

    def level_of(q):
        parts = q.split(".")
        for i, p in enumerate(parts[:-1]):
            if p in ("down_res", "down_attn", "downsample", "up_attn"):
                idx = int(parts[i + 1])
                return idx
            if p in ("up_res", "upsample"):
                return len(cfg.channel_multipliers) - 1 - int(parts[i + 1])
        return None

    return trace_catalog(model, lambda: forward(model, x, 500.0, cond), "toy-denoiser", level_of)


def autoencoder_catalogs(pair, image_hw=(64, 64)):
    """{"big": catalog, "tiny": catalog}, each covering encode + decode."""
    out = {}
    x = torch.zeros(1, 3, *image_hw)
    for which in ("big", "tiny"):
        enc, dec = pair.encoder(which), pair.decoder(which)
        z = {}

        def run():
            z["z"] = enc(x)
            dec(z["z"])

        out[which] = trace_catalog(nn.ModuleDict({"enc": enc, "dec": dec}), run, f"{which}-autoencoder")
    return out


# --- pipeline reports ------------------------------------------------------


@dataclass
class FlopsReport:
    variant: str
    denoiser_gflops: float
    autoencoder_gflops: float
    passes_per_step: int
    steps: int
    nfe: int
    per_frame_tflops: float

    def to_dict(self):
        return asdict(self)


def _gflops(x):
    return flops_of(x) if isinstance(x, ShapeCatalog) else float(x)


def pipeline_report(variant: str, steps: int, catalogs: dict) -> FlopsReport:
    """Per-frame cost of one editing pipeline variant.

    ``catalogs`` maps ``"denoiser"`` (and optionally ``"autoencoder"``) to a
    :class:`ShapeCatalog` or a GFLOPs figure for one evaluation.
    """
    if variant not in VARIANT_PASSES:
        raise ValueError(f"unknown variant {variant!r}")
    if steps < 1 or (variant == "adversarial-1step" and steps != 1):
        raise ValueError(f"variant {variant} cannot run {steps} steps")
    passes = VARIANT_PASSES[variant]
    den = _gflops(catalogs["denoiser"])
    ae = _gflops(catalogs.get("autoencoder", 0.0))
    nfe = passes * steps
    return FlopsReport(variant, den, ae, passes, steps, nfe, (den * nfe + ae) / 1000.0)


def reduced_cost(cost, savings_fraction):
    """Cost remaining after a fractional saving, e.g. 3.2 TFLOPs at 92.6% -> 0.2368."""
    if not 0 <= savings_fraction <= 1:
        raise ValueError("savings fraction must lie in [0, 1]")
    # decimal arithmetic on the printed values, rounded once to a float
    return float(Decimal(repr(cost)) * (1 - Decimal(repr(savings_fraction))))


def variant_ladder(steps=(10, 10, 10, 1), denoiser=None, pruned=None, autoencoder=0.0):
    """Reports for the four pipeline variants on the reference catalogs."""
    denoiser = denoiser if denoiser is not None else unet_catalog()
    pruned = pruned if pruned is not None else prune(denoiser, [0]) if isinstance(denoiser, ShapeCatalog) else denoiser
    variants = ("base-multipass", "mobile-pruned", "guidance-distilled", "adversarial-1step")
    cats = (denoiser, pruned, pruned, pruned)
    return [
        pipeline_report(v, s, {"denoiser": c, "autoencoder": autoencoder}) for v, s, c in zip(variants, steps, cats)
    ]
