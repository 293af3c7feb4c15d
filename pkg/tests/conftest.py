"""Shared fixtures: the cached desk-scale pipeline and the acceptance summary."""

import json
import os
import time
from pathlib import Path

import pytest

CRITERIA = {
    1: "NFE ladder",
    2: "FLOPs arithmetic",
    3: "CFG correctness",
    4: "guidance distillation",
    5: "controllability retention",
    6: "adversarial distillation",
    7: "ablation knobs",
    8: "schedules and conversions",
    9: "cross-frame attention",
    10: "numerical hygiene",
}

# stage -> artifact it leaves behind, in pipeline order
STAGES = {
    "gen-data": "data/val/manifest.jsonl",
    "train-autoencoder": "runs/train-autoencoder/autoencoder.ckpt",
    "train-base": "runs/train-base/base.ckpt",
    "distill-guidance": "runs/distill-guidance/guidance.ckpt",
    "finetune-v": "runs/finetune-v/vpred.ckpt",
    "distill-adversarial": "runs/distill-adversarial/adversarial.ckpt",
}

_results = {}


class DeskRun:
    """The default-config pipeline in one workdir, run once and reused.

    Set MOVIEKIT_ACCEPT_DIR to move the cache; delete it to retrain.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._timings_path = self.root / "stage_timings.json"
        self.timings = json.loads(self._timings_path.read_text()) if self._timings_path.exists() else {}

    def upto(self, stage):
        from moviekit import cli

        for name, artifact in STAGES.items():
            if not ((self.root / artifact).exists() and name in self.timings):
                t0 = time.perf_counter()
                cli.run(name, {}, self.root)
                self.timings[name] = time.perf_counter() - t0
                self._timings_path.write_text(json.dumps(self.timings, indent=1))
            if name == stage:
                return self

    def path(self, stage):
        return self.root / STAGES[stage]

    def load(self, stage):
        from moviekit import cli

        kinds = {
            "train-base": "base",
            "distill-guidance": "guidance-distilled",
            "finetune-v": "v-finetuned",
            "distill-adversarial": "adversarial",
        }
        self.upto(stage)
        model, _ = cli.load_denoiser(self.path(stage), (kinds[stage],))
        return model

    def autoencoder(self):
        from moviekit import cli

        self.upto("train-autoencoder")
        return cli.load_autoencoder(self.path("train-autoencoder"))

    def held_out(self, n=64):
        """Latents of the first ``n`` validation triplets."""
        from moviekit import synthdata
        from moviekit.distill import latent_data

        self.upto("train-autoencoder")
        return latent_data(self.autoencoder(), synthdata.read_corpus(self.root / "data/val")[:n])

    def train_data(self):
        from moviekit import synthdata
        from moviekit.distill import latent_data

        self.upto("train-autoencoder")
        return latent_data(self.autoencoder(), synthdata.read_corpus(self.root / "data/train"))

    def metrics(self, stage):
        rows = (self.root / "runs" / stage / "metrics.jsonl").read_text().splitlines()
        return [json.loads(r) for r in rows if r.strip()]


@pytest.fixture(scope="session")
def desk():
    default = Path(__file__).resolve().parent.parent / ".acceptance"
    return DeskRun(os.environ.get("MOVIEKIT_ACCEPT_DIR", default))


@pytest.fixture
def note(request):
    """Attach a measured value to the current acceptance criterion line."""

    def add(text):
        request.node.user_properties.append(("note", text))

    return add


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n = marker.args[0]
    entry = _results.setdefault(n, {"ok": True, "notes": [], "tests": 0})
    entry["tests"] += 1
    entry["ok"] &= rep.passed
    entry["notes"] += [v for k, v in item.user_properties if k == "note"]
    if rep.failed:
        entry["notes"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for n, title in CRITERIA.items():
        entry = _results.get(n)
        status = "NOT RUN" if entry is None else ("PASS" if entry["ok"] else "FAIL")
        detail = "; ".join(entry["notes"]) if entry else ""
        tr.write_line(f"criterion {n:2d} {status:4s}  {title}: {detail}")
