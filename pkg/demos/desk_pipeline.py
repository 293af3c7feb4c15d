"""
Desk-scale pipeline, stage by stage
===================================

Runs every training stage through the same entry point the command line
uses, each reading the previous stage's checkpoint from its default path:

    corpus -> autoencoders -> base editor -> guidance student
           -> v-prediction student -> one-step adversarial student

With the defaults this takes roughly 25 minutes on one CPU core. ``--quick``
shrinks every stage to a few iterations so the wiring can be checked in
seconds; the resulting models are useless but every artifact exists.

    python demos/desk_pipeline.py --workdir runs/desk
    python demos/desk_pipeline.py --workdir /tmp/toy --quick
"""

import argparse
import json
import time

from moviekit import cli

parser = argparse.ArgumentParser()
parser.add_argument("--workdir", default="runs/desk")
parser.add_argument("--quick", action="store_true")
args = parser.parse_args()

# Toy sizes for a smoke run; an empty dict keeps the stage defaults.
quick = {
    "gen-data": dict(n_train=64, n_val=16),
    "train-autoencoder": dict(n_images=32, iters=20, tiny_iters=20),
    "train-base": dict(iters=20, batch=8),
    "distill-guidance": dict(iters=20, batch=8),
    "finetune-v": dict(iters=20, batch=8),
    "distill-adversarial": dict(iters=10, batch=4, save_every=5),
}

for stage, small in quick.items():
    t0 = time.perf_counter()
    summary = cli.run(stage, small if args.quick else {}, args.workdir)
    print(f"{stage:>20}: {time.perf_counter() - t0:6.1f} s  {json.dumps(summary) if summary else ''}")

# Held-out numbers for the two students: the single-pass gap to the
# three-pass target, the (1,1) check, and the one-step gap to 5-step samples.
rec = cli.run("eval", {"adversarial": "runs/distill-adversarial/adversarial.ckpt", "n_probe": 16 if args.quick else 64}, args.workdir)
print({k: round(v, 4) for k, v in rec.items() if k != "iter"})

# Loss curves for every stage land next to the run directories.
print("plots:", cli.run("plot", {}, args.workdir))
