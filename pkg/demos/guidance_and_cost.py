"""
Guidance arithmetic and per-frame cost
======================================

Two passes over the cheap parts of the library: how the three-branch
guidance combines, and how many denoiser FLOPs each pipeline variant spends
on one frame. Nothing here trains; it runs in a couple of seconds.
"""

import numpy as np
import torch

from moviekit import costmodel as C
from moviekit import denoiser as D
from moviekit.guidance import NfeCounter, cfg_combine, guided_eps

torch.manual_seed(0)

# Three stand-in denoiser outputs for the same latent: no condition,
# image only, image and instruction.
eps_u, eps_i, eps_f = torch.randn(3, 1, 4, 8, 8)

# At unit scales the combination collapses to the fully conditioned branch,
# and s_T = 0 keeps only the image branch.
print("(1,1) == conditional:", torch.allclose(cfg_combine(eps_u, eps_i, eps_f, 1.0, 1.0), eps_f))
print("(1,0) == image only: ", torch.allclose(cfg_combine(eps_u, eps_i, eps_f, 1.0, 0.0), eps_i))

# Raising s_T pushes the output further along (eps_f - eps_i).
for s_T in (2.0, 7.5, 14.0):
    g = cfg_combine(eps_u, eps_i, eps_f, 1.5, s_T)
    print(f"s_T={s_T:5.1f}  |guided - conditional| = {(g - eps_f).norm():.2f}")

# A real (untrained) toy denoiser: one guided step costs three passes per
# sample, which the counter records per sample, not per batched call.
model = D.build_denoiser(D.DenoiserConfig(), np.random.default_rng(0))
x = torch.randn(2, 4, 8, 8)
c_I = torch.randn(2, 4, 8, 8)
c_T = torch.zeros(2, 4, model.cfg.context_dim)
n = NfeCounter()
with torch.no_grad():
    guided_eps(model, x, 500, D.Conditioning(c_I, c_T), 1.5, 7.5, counter=n)
print("denoiser calls for one guided step on 2 latents:", n.denoiser_calls)

# Cost side. The reference UNet catalog is expanded from a layer table and
# counted analytically.
unet = C.unet_catalog()
per_pass = C.flops_of(unet)
print(f"\nreference UNet: {per_pass:.0f} GFLOPs per pass")
print(f"dropping level-0 attention saves {100 * C.pruning_delta(unet, [0]):.1f}% of it")

for rep in C.variant_ladder(denoiser=unet, pruned=C.prune(unet, [0])):
    print(f"{rep.variant:>20}: {rep.nfe:2d} passes/frame, {rep.per_frame_tflops:6.2f} TFLOPs/frame")

# The tiny autoencoder in numbers: 3.2 TFLOPs with 92.6% removed.
print("\ntiny autoencoder cost:", C.reduced_cost(3.2, 0.926), "TFLOPs")
