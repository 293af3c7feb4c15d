"""Procedural editing triplets and clips.

Images are float arrays of shape (H, W, 3) with values in [0, 1]. A triplet's
edited image is produced by applying a fixed pixel transform to the source,
so every sample carries exact ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGE_SIZE = 64
TOKENS = 4
EMBED_DIM = 64
NULL_ID = 0
_TABLE_SEED = 1234
_LUMA = np.array([0.299, 0.587, 0.114])


def _recolor_red(x):
    lum = x @ _LUMA
    return np.stack([0.4 + 0.6 * lum, 0.25 * lum, 0.25 * lum], axis=-1)


def _recolor_blue(x):
    lum = x @ _LUMA
    return np.stack([0.25 * lum, 0.25 * lum, 0.4 + 0.6 * lum], axis=-1)


def _invert(x):
    return 1.0 - x


def _add_border(x, width=4):
    out = x.copy()
    out[:width] = 1.0
    out[-width:] = 1.0
    out[:, :width] = 1.0
    out[:, -width:] = 1.0
    return out


def brighten(x, strength=0.5):
    return x + strength * (1.0 - x)


def darken(x, strength=0.5):
    return x * (1.0 - strength)


def _swap_channels(x):
    return x[..., ::-1].copy()


def _blur(x, size=5):
    return ndimage.uniform_filter(x, size=(size, size, 1), mode="nearest")


#: id -> (name, transform); id 0 is the null instruction
VOCAB = {
    0: ("null", None),
    1: ("recolor-red", _recolor_red),
    2: ("recolor-blue", _recolor_blue),
    3: ("invert", _invert),
    4: ("add-border", _add_border),
    5: ("brighten", brighten),
    6: ("darken", darken),
    7: ("swap-channels", _swap_channels),
    8: ("blur", _blur),
}
EDIT_IDS = tuple(i for i in VOCAB if i != NULL_ID)
NAME_TO_ID = {name: i for i, (name, _) in VOCAB.items()}


def instruction_id(name_or_id) -> int:
    if isinstance(name_or_id, str):
        if name_or_id not in NAME_TO_ID:
            raise KeyError(f"unknown instruction {name_or_id!r}")
        return NAME_TO_ID[name_or_id]
    i = int(name_or_id)
    if i not in VOCAB:
        raise KeyError(f"unknown instruction id {i}")
    return i


def apply_instruction(image, instruction) -> np.ndarray:
    i = instruction_id(instruction)
    if i == NULL_ID:
        raise ValueError("the null instruction has no transform")
    out = VOCAB[i][1](np.asarray(image, dtype=np.float64))
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class EditTriplet:
    source: np.ndarray
    instruction_id: int
    edited: np.ndarray


# --- shape rendering -------------------------------------------------------


def _soft(d, width=0.75):
    # d: signed distance, negative inside; anti-aliased coverage in [0, 1]
    return 1.0 / (1.0 + np.exp(d / width))


def _shape_sdf(kind, yy, xx, cy, cx, size, angle):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == 0:
        return np.hypot(u, v) - size
    if kind == 1:
        return np.maximum(np.abs(u) - size, np.abs(v) - 0.7 * size)
    # equilateral-ish triangle as intersection of three half planes
    d = None
    for k in range(3):
        th = angle + 2 * np.pi * k / 3
        plane = (np.cos(th) * dx + np.sin(th) * dy) - 0.6 * size
        d = plane if d is None else np.maximum(d, plane)
    return d


@dataclass(frozen=True)
class Scene:
    background: np.ndarray
    shapes: tuple  # (kind, cy, cx, size, angle, color, vy, vx, spin)


def random_scene(rng: np.random.Generator, size=IMAGE_SIZE, speed=1.0) -> Scene:
    background = rng.uniform(0.0, 1.0, 3)
    shapes = []
    for _ in range(int(rng.integers(2, 5))):
        kind = int(rng.integers(0, 3))
        radius = rng.uniform(0.12, 0.25) * size
        cy, cx = rng.uniform(0.2, 0.8, 2) * size
        angle = rng.uniform(0, 2 * np.pi)
        color = rng.uniform(0.0, 1.0, 3)
        vy, vx = rng.normal(0.0, 1.0, 2) * speed
        spin = rng.normal(0.0, 0.03) * speed
        shapes.append((kind, cy, cx, radius, angle, color, vy, vx, spin))
    return Scene(background, tuple(shapes))


def render(scene: Scene, frame=0, size=IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = np.broadcast_to(scene.background, (size, size, 3)).copy()
    for kind, cy, cx, radius, angle, color, vy, vx, spin in scene.shapes:
        d = _shape_sdf(kind, yy, xx, cy + vy * frame, cx + vx * frame, radius, angle + spin * frame)
        a = _soft(d)[..., None]
        img = a * color + (1 - a) * img
    return np.clip(img, 0.0, 1.0)


def gen_triplet(rng: np.random.Generator, instruction=None, size=IMAGE_SIZE) -> EditTriplet:
    """Random source image plus its exact edit.

    The instruction is drawn from the edit vocabulary when not given; the draw
    happens before the scene so ``(seed, id)`` fully determines the triplet.
    """
    if instruction is None:
        iid = int(rng.choice(EDIT_IDS))
    else:
        iid = instruction_id(instruction)
        if iid == NULL_ID:
            raise ValueError("triplets need a non-null instruction")
    source = render(random_scene(rng, size), size=size)
    return EditTriplet(source, iid, apply_instruction(source, iid))


@dataclass
class VideoClip:
    frames: list
    fps: float = 8.0

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a clip needs at least one frame")
        shape = np.shape(self.frames[0])
        for f in self.frames:
            if np.shape(f) != shape:
                raise ValueError("all frames must share dimensions")
        if shape[0] % 8 or shape[1] % 8:
            raise ValueError("frame dims must be divisible by 8")

    def __len__(self):
        return len(self.frames)

    def array(self) -> np.ndarray:
        return np.stack(self.frames)


def gen_video(rng: np.random.Generator, n_frames: int, instruction, size=IMAGE_SIZE, speed=1.0):
    """(source clip, edited clip) with smoothly moving shapes."""
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    iid = instruction_id(instruction)
    scene = random_scene(rng, size, speed)
    src = [render(scene, k, size) for k in range(n_frames)]
    return VideoClip(src), VideoClip([apply_instruction(f, iid) for f in src])


# --- instruction tokens ----------------------------------------------------

_table_cache = {}


def _token_table(dim):
    if dim not in _table_cache:
        rng = np.random.default_rng(_TABLE_SEED)
        tab = rng.normal(0.0, 1.0, (len(VOCAB), TOKENS, dim)).astype(np.float32)
        tab.setflags(write=False)
        _table_cache[dim] = tab
    return _table_cache[dim]


def encode_instruction(iid, dim=EMBED_DIM) -> np.ndarray:
    """Fixed (TOKENS, dim) embedding sequence; id 0 gives the null sequence."""
    return _token_table(dim)[instruction_id(iid)].copy()


# --- datasets --------------------------------------------------------------


def make_triplets(seed: int, n: int, size=IMAGE_SIZE):
    """``n`` triplets, sample ``k`` drawn from ``default_rng([seed, k])``."""
    return [gen_triplet(np.random.default_rng([seed, k]), size=size) for k in range(n)]


def split_seeds(seed: int):
    """Disjoint (train, val) seed namespaces derived from one seed."""
    return 2 * seed, 2 * seed + 1


def write_corpus(path, seed: int, n: int, size=IMAGE_SIZE):
    """PNG pairs plus ``manifest.jsonl`` lines ``{index, instruction_id, seed}``."""
    from PIL import Image

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, trip in enumerate(make_triplets(seed, n, size)):
        for tag, img in (("source", trip.source), ("edited", trip.edited)):
            Image.fromarray(to_uint8(img)).save(root / f"{k:06d}_{tag}.png")
        lines.append(json.dumps({"index": k, "instruction_id": trip.instruction_id, "seed": [seed, k]}))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return root / "manifest.jsonl"


def read_corpus(path):
    from PIL import Image

    root = Path(path)
    out = []
    for line in (root / "manifest.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        k = rec["index"]
        src = np.asarray(Image.open(root / f"{k:06d}_source.png"), dtype=np.float64) / 255.0
        edt = np.asarray(Image.open(root / f"{k:06d}_edited.png"), dtype=np.float64) / 255.0
        out.append(EditTriplet(src, int(rec["instruction_id"]), edt))
    return out


def to_uint8(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
