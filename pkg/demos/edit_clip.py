"""
Editing a clip with and without cross-frame attention
=====================================================

Takes the checkpoints written by ``desk_pipeline.py``, renders a short
synthetic clip of moving shapes and edits it with each pipeline variant. The
middle frame is the anchor: its keys and values replace every other frame's
own in the self-attention layers. The same clip is also edited frame by frame
with plain self-attention, from the same starting noise, for comparison.

Frames go to ``<workdir>/edits/<variant>-{cross,self}/`` as PNGs.

    python demos/edit_clip.py --workdir runs/desk --instruction invert
"""

import argparse
from pathlib import Path

import numpy as np

from moviekit import cli
from moviekit import synthdata as sd
from moviekit import videoedit as V

parser = argparse.ArgumentParser()
parser.add_argument("--workdir", default="runs/desk")
parser.add_argument("--instruction", default="invert")
parser.add_argument("--frames", type=int, default=8)
parser.add_argument("--s-T", type=float, default=7.5)
args = parser.parse_args()
root = Path(args.workdir)

# All three editors plus the autoencoder pair, from the default stage paths.
KIND = {"base": "base", "guidance": "guidance-distilled", "adversarial": "adversarial"}
load = lambda stage, ckpt: cli.load_denoiser(root / "runs" / stage / f"{ckpt}.ckpt", (KIND[ckpt],))[0]
models = V.EditModels(
    cli.load_autoencoder(root / "runs/train-autoencoder/autoencoder.ckpt"),
    base=load("train-base", "base"),
    distilled=load("distill-guidance", "guidance"),
    student=load("distill-adversarial", "adversarial"),
)

clip, target = sd.gen_video(np.random.default_rng(3), args.frames, args.instruction)
print(f"{len(clip)} frames, anchor = frame {V.select_anchor(len(clip))}")
print(f"source consistency {V.frame_consistency(clip):.4f}, ground-truth edit {V.frame_consistency(target):.4f}")

for variant in V.VARIANTS:
    req = V.EditRequest(args.instruction, s_T=args.s_T, variant=variant)
    for cross in (True, False):
        cost = V.CostCounter()
        # same seed either way: the attention mode is the only difference
        out = V.edit_video(clip, req, models, np.random.default_rng(0), cross_frame=cross, counter=cost)
        V.write_clip(out, root / "edits" / f"{variant}-{'cross' if cross else 'self'}")
        err = np.abs(out.array() - target.array()).mean()
        print(
            f"{variant:>20} {'cross' if cross else 'self ':5}: consistency {V.frame_consistency(out):.4f}, "
            f"|edit - truth| {err:.3f}, {cost.nfe.denoiser_calls // len(clip)} denoiser calls/frame"
        )
