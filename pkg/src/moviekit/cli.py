"""Command-line entry point: ``moviekit [--workdir DIR] COMMAND [--config FILE] [--key value ...]``.

Every command reads a flat TOML config (file values, then command-line
overrides), writes a run directory under ``<workdir>/runs/<command>`` holding
``config.toml``, ``metrics.jsonl`` and its artifacts, and exits non-zero with
an ``error.json`` record on failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

logger = logging.getLogger("moviekit")

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class ProvenanceError(RuntimeError):
    pass


# --- config schemas ---------------------------------------------------------
# key -> (default, help); the type of the default fixes the accepted type

_AE = "runs/train-autoencoder/autoencoder.ckpt"
_BASE = "runs/train-base/base.ckpt"
_GUIDED = "runs/distill-guidance/guidance.ckpt"
_VPRED = "runs/finetune-v/vpred.ckpt"
_ADV = "runs/distill-adversarial/adversarial.ckpt"

SCHEMAS = {
    "gen-data": {
        "seed": (0, "corpus seed; train/val use disjoint derived seeds"),
        "n_train": (3000, "training triplets"),
        "n_val": (200, "validation triplets"),
        "out": ("data", "corpus root (train/ and val/ below it)"),
    },
    "train-autoencoder": {
        "data": ("data/train", "training corpus"),
        "n_images": (500, "images used (sources then edits)"),
        "iters": (2000, "big autoencoder iterations"),
        "tiny_iters": (2000, "tiny autoencoder iterations"),
        "batch": (8, "batch size"),
        "lr": (2e-3, "big autoencoder learning rate"),
        "tiny_lr": (2e-3, "tiny autoencoder learning rate"),
        "seed": (0, "init and sampling seed"),
    },
    "train-base": {
        "data": ("data/train", "training corpus"),
        "autoencoder": (_AE, "autoencoder checkpoint"),
        "iters": (3000, "iterations"),
        "batch": (32, "batch size"),
        "lr": (1e-3, "learning rate"),
        "drop_image": (0.05, "probability of dropping only the image condition"),
        "drop_text": (0.05, "probability of dropping only the instruction"),
        "drop_both": (0.05, "probability of dropping both"),
        "base_channels": (32, "denoiser width"),
        "channel_multipliers": ([1, 2], "width multiplier per level"),
        "attention_levels": ([0, 1], "levels with attention blocks"),
        "seed": (0, "init and sampling seed"),
    },
    "distill-guidance": {
        "data": ("data/train", "training corpus"),
        "autoencoder": (_AE, "autoencoder checkpoint"),
        "teacher": (_BASE, "base (multi-pass) teacher checkpoint"),
        "lambda": (1.0, "loss weight"),
        "lr": (1e-3, "peak learning rate"),
        "iters": (2000, "iterations"),
        "batch": (16, "batch size"),
        "s_I_range": ([1.0, 3.0], "image guidance scale range"),
        "s_T_range": ([2.0, 14.0], "text guidance scale range"),
        "seed": (0, "sampling seed"),
    },
    "finetune-v": {
        "data": ("data/train", "training corpus"),
        "autoencoder": (_AE, "autoencoder checkpoint"),
        "teacher": (_GUIDED, "guidance-distilled epsilon checkpoint"),
        "iters": (2000, "iterations"),
        "batch": (16, "batch size"),
        "lr": (1e-4, "learning rate"),
        "levels": (8, "student Euler levels"),
        "seed": (0, "sampling seed"),
    },
    "distill-adversarial": {
        "data": ("data/train", "training corpus"),
        "autoencoder": (_AE, "autoencoder checkpoint"),
        "teacher": (_GUIDED, "guidance-distilled teacher checkpoint"),
        "student": (_VPRED, "v-prediction student initialization"),
        "lambda_mse": (1.0, "distillation MSE weight"),
        "lambda_gen": (0.5, "adversarial weight"),
        "lambda_r1": (1e-4, "R1 penalty weight"),
        "lr_student": (1e-5, "student learning rate"),
        "lr_disc": (1e-4, "discriminator head learning rate"),
        "iters": (2000, "iterations"),
        "batch": (16, "batch size"),
        "teacher_steps": (5, "teacher sampling steps"),
        "student_timesteps": (8, "student Euler levels"),
        "noise_mean": (-1.0, "logit-normal mean of discriminator timesteps"),
        "noise_std": (1.0, "logit-normal std of discriminator timesteps"),
        "head_guidance": (True, "condition discriminator heads on s_I and s_T"),
        "resume": ("", "train-state file to resume from"),
        "save_every": (500, "train-state snapshot interval (0: only at the end)"),
        "seed": (0, "init and sampling seed"),
    },
    "edit-video": {
        "clip": ("", "input clip (PNG dir or .npy); empty: synthesize one"),
        "n_frames": (8, "frames of the synthetic clip"),
        "clip_seed": (0, "seed of the synthetic clip"),
        "instruction": ("invert", "edit instruction name or id"),
        "variant": ("guidance-distilled", "base-multipass | guidance-distilled | adversarial-1step"),
        "s_I": (1.5, "image guidance scale"),
        "s_T": (7.5, "text guidance scale"),
        "steps": (0, "sampling steps (0: variant default)"),
        "cross_frame": (True, "share anchor keys/values across frames"),
        "encoder": ("big", "big | tiny"),
        "decoder": ("big", "big | tiny"),
        "autoencoder": (_AE, "autoencoder checkpoint"),
        "base": (_BASE, "multi-pass model"),
        "distilled": (_GUIDED, "guidance-distilled model"),
        "student": (_ADV, "single-step student"),
        "out": ("edited.npy", "output clip inside the run directory"),
        "seed": (0, "initial-noise seed"),
    },
    "profile-flops": {
        "reference": ("sd15", "sd15 (reference UNet catalog) | toy"),
        "variants": (
            ["base-multipass", "mobile-pruned", "guidance-distilled", "adversarial-1step"],
            "pipeline variants",
        ),
        "steps": ([10, 10, 10, 1], "steps per variant"),
        "pruned_levels": ([0], "attention levels removed for pruned variants"),
        "autoencoder_tflops": (0.0, "per-frame autoencoder cost for the sd15 reference"),
        "latent_size": (60, "latent side for the sd15 reference"),
    },
    "eval": {
        "data": ("data/val", "evaluation corpus"),
        "autoencoder": (_AE, "autoencoder checkpoint"),
        "teacher": (_BASE, "multi-pass teacher"),
        "student": (_GUIDED, "guidance-distilled student"),
        "adversarial": ("", "optional single-step student to compare with the 5-step teacher"),
        "n_probe": (64, "probe batch size"),
        "seed": (0, "probe seed"),
    },
    "plot": {
        "runs": (
            ["runs/distill-guidance", "runs/finetune-v", "runs/distill-adversarial"],
            "run directories whose metrics to plot",
        ),
        "keys": (["loss_total", "loss_disc", "nfe.denoiser_calls", "frame_consistency"], "metric keys"),
        "smooth": (25, "moving-average window"),
    },
}


def _coerce(key, value, default):
    kind = type(default)
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind is list:
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{key}: expected a JSON list, got {value!r}") from e
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        return value
    if kind is float:
        try:
            return float(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from e
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from e
    return str(value)


def resolve_config(command, file_values=None, overrides=None):
    """Defaults <- config file <- command-line overrides, with unknown keys rejected."""
    schema = SCHEMAS[command]
    cfg = {k: v[0] for k, v in schema.items()}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key == "schema":
                if int(value) != SCHEMA_VERSION:
                    raise ConfigError(f"unsupported config schema {value}")
                continue
            if key not in schema:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            cfg[key] = _coerce(key, value, schema[key][0])
    return cfg


def load_config_file(path):
    with open(path, "rb") as f:
        data = tomllib.load(f)
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"config must be flat key = value pairs; {k!r} is a table")
    return data


# --- run directories ----------------------------------------------------------


@dataclass
class Run:
    command: str
    workdir: Path
    dir: Path
    config: dict

    def path(self, rel):
        p = Path(rel)
        return p if p.is_absolute() else self.workdir / p

    def artifact(self, name):
        return self.dir / name

    def log(self, record):
        with open(self.dir / "metrics.jsonl", "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _start_run(command, workdir, config, name=None):
    run_dir = workdir / "runs" / (name or command)
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("metrics.jsonl", "error.json"):
        (run_dir / stale).unlink(missing_ok=True)
    snapshot = {"schema": SCHEMA_VERSION, **config}
    (run_dir / "config.toml").write_text(tomli_w.dumps(snapshot))
    return Run(command, workdir, run_dir, config)


def _file_sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- checkpoints with provenance -------------------------------------------


def save_denoiser(path, model, stage, config, parents=()):
    from . import checkpoint

    header = {
        "stage": stage,
        "denoiser": model.cfg.to_dict(),
        "config": config,
        "parents": [{"path": str(p), "sha256": _file_sha(p)} for p in parents],
    }
    checkpoint.save_module(path, model, header)


def load_denoiser(path, stages):
    """Load a denoiser checkpoint whose provenance stage is one of ``stages``."""
    from . import checkpoint
    from .denoiser import Denoiser, DenoiserConfig

    path = Path(path)
    if not path.exists():
        raise ProvenanceError(f"missing upstream checkpoint {path}; run the stage that produces it first")
    header, _ = checkpoint.load_records(path)
    if header.get("stage") not in stages:
        raise ProvenanceError(f"{path} comes from stage {header.get('stage')!r}, expected one of {list(stages)}")
    model = Denoiser(DenoiserConfig.from_dict(header["denoiser"]))
    checkpoint.load_module(path, model)
    return model, header


def load_autoencoder(path):
    from . import checkpoint
    from .autoencoder import AutoencoderPair

    path = Path(path)
    if not path.exists():
        raise ProvenanceError(f"missing autoencoder checkpoint {path}; run train-autoencoder first")
    pair = AutoencoderPair()
    header = checkpoint.load_module(path, pair)
    if header.get("stage") != "autoencoder":
        raise ProvenanceError(f"{path} is not an autoencoder checkpoint")
    return pair


def _latent_data(run, key="data", limit=None):
    from . import synthdata
    from .distill import latent_data

    root = run.path(run.config[key])
    if not (root / "manifest.jsonl").exists():
        raise ProvenanceError(f"no corpus at {root}; run gen-data first")
    triplets = synthdata.read_corpus(root)[:limit]
    return latent_data(load_autoencoder(run.path(run.config["autoencoder"])), triplets)


# --- commands -----------------------------------------------------------------


def cmd_gen_data(run):
    from . import synthdata

    c = run.config
    train_seed, val_seed = synthdata.split_seeds(c["seed"])
    out = run.path(c["out"])
    hashes = {}
    for split, seed, n in (("train", train_seed, c["n_train"]), ("val", val_seed, c["n_val"])):
        manifest = synthdata.write_corpus(out / split, seed, n)
        hashes[split] = _file_sha(manifest)
        run.log({"iter": 0, "split": split, "n": n, "manifest_sha256": hashes[split]})
    (run.artifact("manifest_hashes.json")).write_text(json.dumps(hashes, indent=1))
    return hashes


def cmd_train_autoencoder(run):
    import torch

    from . import checkpoint, synthdata
    from .autoencoder import AutoencoderTrainConfig, build_pair, latent_gap, train_pair

    c = run.config
    root = run.path(c["data"])
    if not (root / "manifest.jsonl").exists():
        raise ProvenanceError(f"no corpus at {root}; run gen-data first")
    trip = synthdata.read_corpus(root)
    half = max(1, c["n_images"] // 2)
    images = np.stack([t.source for t in trip[:half]] + [t.edited for t in trip[:half]])
    pair = build_pair(np.random.default_rng([c["seed"], 0]))
    cfg = AutoencoderTrainConfig(c["iters"], c["tiny_iters"], c["batch"], None, c["lr"], c["tiny_lr"])
    counter = {"big": 0, "tiny": 0}

    def log(rec):
        counter[rec["stage"]] += 1
        run.log({"iter": counter["big"] + counter["tiny"] - 1, "stage": rec["stage"], "loss_total": rec["loss"]})

    pair, _ = train_pair(pair, images, cfg, np.random.default_rng([c["seed"], 1]), log)
    with torch.no_grad():
        gap = latent_gap(pair, images[: min(100, len(images))])
    ckpt = run.artifact("autoencoder.ckpt")
    checkpoint.save_records(ckpt, pair.state_dict(), {"stage": "autoencoder", "config": c})
    return {"latent_gap": gap}


def cmd_train_base(run):
    from .denoiser import DenoiserConfig, build_denoiser
    from .distill import BaseTrainConfig, train_base

    c = run.config
    data = _latent_data(run)
    dcfg = DenoiserConfig(
        base_channels=c["base_channels"],
        channel_multipliers=tuple(c["channel_multipliers"]),
        attention_levels=frozenset(c["attention_levels"]),
    )
    model = build_denoiser(dcfg, np.random.default_rng([c["seed"], 0]))
    cfg = BaseTrainConfig(c["iters"], c["batch"], c["lr"], c["drop_image"], c["drop_text"], c["drop_both"])
    train_base(model, data, cfg, np.random.default_rng([c["seed"], 1]), run.log)
    save_denoiser(run.artifact("base.ckpt"), model, "base", c, [run.path(c["autoencoder"])])


def cmd_distill_guidance(run):
    from .denoiser import guidance_student_from
    from .distill import GuidanceDistillConfig, guidance_probe_loss, make_guidance_probe, train_guidance_distill

    c = run.config
    teacher, _ = load_denoiser(run.path(c["teacher"]), ("base",))
    data = _latent_data(run)
    student = guidance_student_from(teacher)
    cfg = GuidanceDistillConfig(c["lambda"], c["lr"], c["iters"], c["batch"], c["s_I_range"], c["s_T_range"])
    probe = make_guidance_probe(data, np.random.default_rng([c["seed"], 99]), 64, cfg)
    before = guidance_probe_loss(teacher, student, probe)
    train_guidance_distill(teacher, student, data, cfg, np.random.default_rng([c["seed"], 1]), run.log)
    after = guidance_probe_loss(teacher, student, probe)
    run.log({"iter": c["iters"], "probe_loss_initial": before, "probe_loss_final": after})
    save_denoiser(run.artifact("guidance.ckpt"), student, "guidance-distilled", c, [run.path(c["teacher"])])
    return {"probe_loss_initial": before, "probe_loss_final": after}


def cmd_finetune_v(run):
    from .denoiser import retarget
    from .distill import VFinetuneConfig, finetune_v_prediction, make_v_probe, v_probe_loss

    c = run.config
    teacher, _ = load_denoiser(run.path(c["teacher"]), ("guidance-distilled",))
    data = _latent_data(run)
    student = retarget(teacher, "v")
    cfg = VFinetuneConfig(c["iters"], c["batch"], c["lr"], c["levels"])
    probe = make_v_probe(data, np.random.default_rng([c["seed"], 99]), 64, cfg)
    before = v_probe_loss(teacher, student, probe)
    finetune_v_prediction(teacher, student, data, cfg, np.random.default_rng([c["seed"], 1]), run.log)
    after = v_probe_loss(teacher, student, probe)
    run.log({"iter": c["iters"], "probe_loss_initial": before, "probe_loss_final": after})
    save_denoiser(run.artifact("vpred.ckpt"), student, "v-finetuned", c, [run.path(c["teacher"])])
    return {"probe_loss_initial": before, "probe_loss_final": after}


def cmd_distill_adversarial(run):
    from . import schedules as S
    from .distill import AdversarialConfig, AdversarialTrainer, Discriminator

    c = run.config
    teacher, _ = load_denoiser(run.path(c["teacher"]), ("guidance-distilled",))
    student, _ = load_denoiser(run.path(c["student"]), ("v-finetuned",))
    data = _latent_data(run)
    cfg = AdversarialConfig(
        lambda_mse=c["lambda_mse"],
        lambda_gen=c["lambda_gen"],
        lambda_r1=c["lambda_r1"],
        lr_student=c["lr_student"],
        lr_disc=c["lr_disc"],
        iters=c["iters"],
        batch=c["batch"],
        teacher_steps=c["teacher_steps"],
        student_timesteps=c["student_timesteps"],
        disc_t_sampler=S.TimestepSamplerConfig(c["noise_mean"], c["noise_std"]),
        head_guidance=c["head_guidance"],
    )
    disc = Discriminator(teacher, np.random.default_rng([c["seed"], 0]), guidance_heads=c["head_guidance"])
    trainer = AdversarialTrainer(teacher, student, disc, data, cfg, np.random.default_rng([c["seed"], 1]), run.log)
    if c["resume"]:
        trainer.load(run.path(c["resume"]))
    state = run.artifact("train_state.ckpt")
    every = c["save_every"]
    while trainer.iteration < cfg.iters:
        trainer.run(min(every, cfg.iters - trainer.iteration) if every else None)
        trainer.save(state)
    trainer.save(state)
    save_denoiser(
        run.artifact("adversarial.ckpt"), student, "adversarial", c, [run.path(c["teacher"]), run.path(c["student"])]
    )


def cmd_edit_video(run):
    import torch

    from . import synthdata
    from .videoedit import CostCounter, EditModels, EditRequest, edit_video, frame_consistency, read_clip, write_clip

    c = run.config
    req = EditRequest(c["instruction"], c["s_I"], c["s_T"], c["steps"] or None, c["variant"], c["encoder"], c["decoder"])
    pair = load_autoencoder(run.path(c["autoencoder"]))
    slot = {"base-multipass": ("base", ("base",)), "guidance-distilled": ("distilled", ("guidance-distilled",)),
            "adversarial-1step": ("student", ("adversarial", "v-finetuned"))}[req.variant]
    model, _ = load_denoiser(run.path(c[slot[0]]), slot[1])
    models = EditModels(pair, **{slot[0]: model})
    if c["clip"]:
        clip = read_clip(run.path(c["clip"]))
    else:
        clip, _ = synthdata.gen_video(np.random.default_rng(c["clip_seed"]), c["n_frames"], req.instruction)
    counter = CostCounter()
    start = time.perf_counter()
    with torch.no_grad():
        out = edit_video(clip, req, models, np.random.default_rng(c["seed"]), c["cross_frame"], counter)
    elapsed = time.perf_counter() - start
    write_clip(out, run.artifact(c["out"]))
    rec = {"iter": 0, **counter.metrics(), "frames": len(clip), "seconds": elapsed}
    if len(out) > 1:
        rec["frame_consistency"] = frame_consistency(out)
        rec["source_consistency"] = frame_consistency(clip)
    rec["nfe.per_frame"] = counter.nfe.denoiser_calls / len(clip)
    run.log(rec)
    return rec


def cmd_profile_flops(run):
    from . import costmodel as C

    c = run.config
    if len(c["variants"]) != len(c["steps"]):
        raise ConfigError("variants and steps must have equal length")
    if c["reference"] == "sd15":
        full = C.unet_catalog(latent_size=(c["latent_size"], c["latent_size"]))
        ae = c["autoencoder_tflops"] * 1000.0
    elif c["reference"] == "toy":
        import torch

        from .autoencoder import build_pair
        from .denoiser import DenoiserConfig, build_denoiser

        torch.manual_seed(0)
        full = C.denoiser_catalog(build_denoiser(DenoiserConfig(), np.random.default_rng(0)))
        ae = C.flops_of(C.autoencoder_catalogs(build_pair(np.random.default_rng(0)))["big"])
    else:
        raise ConfigError(f"unknown reference {c['reference']!r}")
    pruned = C.prune(full, c["pruned_levels"])
    reports = []
    for i, (variant, steps) in enumerate(zip(c["variants"], c["steps"])):
        cat = full if variant == "base-multipass" else pruned
        rep = C.pipeline_report(variant, steps, {"denoiser": cat, "autoencoder": ae})
        reports.append(rep.to_dict())
        run.log({"iter": i, **rep.to_dict()})
    summary = {
        "reference": full.name,
        "gflops_per_pass": C.flops_of(full),
        "pruning_fraction": C.pruning_delta(full, c["pruned_levels"]),
        "reports": reports,
    }
    run.artifact("report.json").write_text(json.dumps(summary, indent=1))
    run.artifact("catalog.json").write_text(full.to_json())
    return summary


def cmd_eval(run):
    import torch
    import torch.nn.functional as F

    from .denoiser import Conditioning, forward
    from .distill import distillation_gap, guidance_probe_loss, make_guidance_probe

    c = run.config
    teacher, _ = load_denoiser(run.path(c["teacher"]), ("base",))
    student, _ = load_denoiser(run.path(c["student"]), ("guidance-distilled",))
    data = _latent_data(run)
    probe = make_guidance_probe(data, np.random.default_rng([c["seed"], 0]), c["n_probe"], scales=(1.0, 1.0))
    with torch.no_grad():
        cond_pass = forward(teacher, probe.x_t, probe.t, Conditioning(probe.cond.c_I, probe.cond.c_T))
        mse11 = float(F.mse_loss(forward(student, probe.x_t, probe.t, probe.cond), cond_pass))
    rand_probe = make_guidance_probe(data, np.random.default_rng([c["seed"], 1]), c["n_probe"])
    rec = {"iter": 0, "mse_at_1_1": mse11, "probe_loss": guidance_probe_loss(teacher, student, rand_probe)}
    if c["adversarial"]:
        adv, _ = load_denoiser(run.path(c["adversarial"]), ("adversarial",))
        rec["adversarial_gap"] = distillation_gap(student, adv, data, np.random.default_rng([c["seed"], 2]), c["n_probe"])
    run.log(rec)
    return rec


def cmd_plot(run):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    c = run.config
    written = []
    for key in c["keys"]:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        any_line = False
        for rd in c["runs"]:
            path = run.path(rd) / "metrics.jsonl"
            if not path.exists():
                continue
            rows = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
            pts = [(r.get("iter", i), r[key]) for i, r in enumerate(rows) if key in r]
            if not pts:
                continue
            x, y = map(np.asarray, zip(*pts))
            w = min(c["smooth"], len(y))
            if w > 1:
                y = np.convolve(y, np.ones(w) / w, mode="valid")
                x = x[w - 1 :]
            ax.plot(x, y, label=Path(rd).name)
            any_line = True
        if not any_line:
            plt.close(fig)
            continue
        ax.set_xlabel("iteration")
        ax.set_ylabel(key)
        ax.legend()
        fig.tight_layout()
        out = run.artifact(f"{key.replace('.', '_')}.png")
        fig.savefig(out, dpi=100)
        plt.close(fig)
        written.append(out.name)
    run.log({"iter": 0, "plots": written})
    return written


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-autoencoder": cmd_train_autoencoder,
    "train-base": cmd_train_base,
    "distill-guidance": cmd_distill_guidance,
    "finetune-v": cmd_finetune_v,
    "distill-adversarial": cmd_distill_adversarial,
    "edit-video": cmd_edit_video,
    "profile-flops": cmd_profile_flops,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def run(command, config=None, workdir=".", name=None):
    """Execute ``command`` with a resolved config; returns the command's summary."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = resolve_config(command, config)
    r = _start_run(command, Path(workdir), cfg, name)
    return COMMANDS[command](r)


def _apply_threads():
    n = os.environ.get("MOVIEKIT_THREADS")
    if n:
        import torch

        torch.set_num_threads(max(1, int(n)))


def build_parser():
    p = argparse.ArgumentParser(prog="moviekit", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default=".", help="root for all relative paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat TOML config file")
        sp.add_argument("--run-name", help="run directory name (default: the command)")
        for key, (default, help_) in schema.items():
            shown = json.dumps(default) if isinstance(default, list) else default
            sp.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}", default=None, help=f"{help_} [{shown}]")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _apply_threads()
    workdir = Path(args.workdir)
    run_dir = workdir / "runs" / (args.run_name or args.command)
    try:
        file_values = load_config_file(workdir / args.config) if args.config else {}
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("opt_") and v is not None}
        cfg = resolve_config(args.command, file_values, overrides)
        r = _start_run(args.command, workdir, cfg, args.run_name)
        summary = COMMANDS[args.command](r)
    except Exception as e:  # noqa: BLE001 - reported as a machine-readable record
        code = 2 if isinstance(e, ConfigError) else 3 if isinstance(e, ProvenanceError) else 1
        record = {"command": args.command, "error": type(e).__name__, "message": str(e), "exit_code": code}
        if args.verbose:
            record["traceback"] = traceback.format_exc()
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "error.json").write_text(json.dumps(record, indent=1))
        print(json.dumps(record), file=sys.stderr)
        return code
    if summary is not None:
        print(json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
