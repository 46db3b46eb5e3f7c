"""
Toy moving-shape sequence dataset.

Every class is a "regime": a shape family plus a motion law. Per-clip
parameters (size, brightness, start position, texture) are drawn with
domain randomization from a generator seeded by (seed, split, class, index),
so a spec fully determines the dataset.

Usage:
    python data_collection/simulation/toy_factory.py --config configs/toy.yaml --out runs/toy
"""

import argparse
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from tqdm import tqdm

from common.config import load_config
from common.errors import DataError
from common.log import banner, log

STEP_PX = 2

# class id -> (shape, direction); motion laws move an integer STEP_PX per frame
CLASS_RULES = [
    ("circle", "right"),
    ("square", "down"),
    ("circle", "oscillate"),
    ("square", "up"),
]

VOCAB = [
    "circle",
    "square",
    "dim",
    "bright",
    "small",
    "large",
    "right",
    "down",
    "oscillate",
    "up",
]
TOKEN_IDS = {word: i for i, word in enumerate(VOCAB)}

SPLIT_CODES = {"train": 0, "test": 1}


@dataclass
class SequenceClip:
    """F x C x H x W pixels in [0, 1] plus class, attribute tokens and provenance."""

    pixels: torch.Tensor
    class_id: int
    tokens: list = field(default_factory=list)
    source: str = "real"
    clip_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise DataError(f"clip {self.clip_id}: expected FxCxHxW pixels, got {tuple(self.pixels.shape)}")
        if self.source not in ("real", "synthetic"):
            raise DataError(f"clip {self.clip_id}: unknown source {self.source!r}")
        if not torch.isfinite(self.pixels).all():
            raise DataError(f"clip {self.clip_id}: non-finite pixels")
        if self.pixels.numel() and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DataError(f"clip {self.clip_id}: pixel values outside [0, 1]")

    @property
    def num_frames(self):
        return self.pixels.shape[0]

    @property
    def first_frame(self):
        return self.pixels[0]


@dataclass
class ToyDatasetSpec:
    num_classes: int = 3
    train_counts: list = field(default_factory=lambda: [100, 25, 25])
    test_counts: list = field(default_factory=lambda: [20, 20, 20])
    image_size: int = 32
    channels: int = 1
    num_frames: int = 8
    seed: int = 0

    @classmethod
    def from_config(cls, cfg, seed=None):
        ds = cfg.dataset
        return cls(
            num_classes=ds.num_classes,
            train_counts=list(ds.train_counts),
            test_counts=list(ds.test_counts),
            image_size=ds.image_size,
            channels=ds.channels,
            num_frames=ds.num_frames,
            seed=cfg.experiment.seed if seed is None else seed,
        )

    def check(self):
        if not 2 <= self.num_classes <= len(CLASS_RULES):
            raise DataError(f"num_classes must lie in [2, {len(CLASS_RULES)}]")
        for name in ("train_counts", "test_counts"):
            counts = getattr(self, name)
            if len(counts) != self.num_classes:
                raise DataError(f"{name} needs one entry per class")
            if any(c < 1 for c in counts):
                raise DataError(f"{name} entries must be >= 1, got {counts}")
        if self.num_frames < 1 or self.channels < 1:
            raise DataError("num_frames and channels must be >= 1")
        if self.image_size < 16:
            raise DataError("image_size must be >= 16 to fit a moving shape")
        return self


@dataclass
class ToyDataset:
    train: list
    test: list

    def class_counts(self, split="train"):
        counts = {}
        for clip in getattr(self, split):
            counts[clip.class_id] = counts.get(clip.class_id, 0) + 1
        return dict(sorted(counts.items()))


def motion_offsets(direction, num_frames):
    """Per-frame (dy, dx) offsets from the start position."""
    offsets = []
    for f in range(num_frames):
        if direction == "right":
            offsets.append((0, STEP_PX * f))
        elif direction == "down":
            offsets.append((STEP_PX * f, 0))
        elif direction == "up":
            offsets.append((-STEP_PX * f, 0))
        elif direction == "oscillate":
            # triangle wave 0, +2, +4, +2, 0, -2, -4, -2, ...
            phase = f % 8
            tri = [0, 1, 2, 1, 0, -1, -2, -1][phase]
            offsets.append((0, STEP_PX * tri))
        else:
            raise DataError(f"unknown motion law {direction!r}")
    return offsets


def shape_mask(shape, center, radius, size):
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = center
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    if shape == "square":
        return (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
    raise DataError(f"unknown shape {shape!r}")


def get_clip_params(spec, class_id, rng):
    """
    Base regime for the class plus domain randomization of size, brightness
    and start position.
    """
    shape, direction = CLASS_RULES[class_id]
    size = spec.image_size
    offsets = motion_offsets(direction, spec.num_frames)

    radius = int(round(size * rng.uniform(0.15, 0.2)))
    brightness = float(rng.uniform(0.55, 0.95))

    # start position keeps the whole trajectory one pixel inside the frame
    ys = [o[0] for o in offsets]
    xs = [o[1] for o in offsets]
    lo_y, hi_y = radius + 1 - min(ys), size - radius - 2 - max(ys)
    lo_x, hi_x = radius + 1 - min(xs), size - radius - 2 - max(xs)
    if lo_y > hi_y or lo_x > hi_x:
        raise DataError(f"image_size {size} too small for {spec.num_frames}-frame {direction} motion")
    start = (int(rng.integers(lo_y, hi_y + 1)), int(rng.integers(lo_x, hi_x + 1)))

    tokens = [
        shape,
        "bright" if brightness >= 0.75 else "dim",
        "large" if radius >= size * 0.175 else "small",
        direction,
    ]
    return {
        "shape": shape,
        "direction": direction,
        "radius": radius,
        "brightness": brightness,
        "centers": [(start[0] + dy, start[1] + dx) for dy, dx in offsets],
        "tokens": [TOKEN_IDS[t] for t in tokens],
    }


def render_clip(spec, params, rng):
    size = spec.image_size
    r = params["radius"]
    background = np.clip(0.1 + 0.03 * rng.standard_normal((size, size)), 0.0, 1.0)
    # texture rides with the shape so block matching sees a rigid translation
    texture = np.clip(
        params["brightness"] + 0.08 * rng.standard_normal((2 * r + 1, 2 * r + 1)), 0.0, 1.0
    )

    frames = np.empty((spec.num_frames, spec.channels, size, size), dtype=np.float32)
    for f, (cy, cx) in enumerate(params["centers"]):
        frame = background.copy()
        mask = shape_mask(params["shape"], (cy, cx), r, size)
        ys, xs = np.nonzero(mask)
        frame[ys, xs] = texture[ys - cy + r, xs - cx + r]
        frames[f] = frame[None]
    return torch.from_numpy(frames)


def make_clip(spec, split, class_id, index):
    rng = np.random.default_rng([spec.seed, SPLIT_CODES[split], class_id, index])
    params = get_clip_params(spec, class_id, rng)
    pixels = render_clip(spec, params, rng)
    return SequenceClip(
        pixels=pixels,
        class_id=class_id,
        tokens=params["tokens"],
        source="real",
        clip_id=f"real_{split}_c{class_id}_{index:04d}",
        meta={k: params[k] for k in ("shape", "direction", "radius", "centers")},
    )


def make_toy_dataset(spec):
    spec.check()
    splits = {}
    for split, counts in (("train", spec.train_counts), ("test", spec.test_counts)):
        clips = []
        for class_id, count in enumerate(counts):
            for index in range(count):
                clips.append(make_clip(spec, split, class_id, index))
        splits[split] = clips
    return ToyDataset(train=splits["train"], test=splits["test"])


if __name__ == "__main__":
    # clip_store imports SequenceClip from here
    from data_collection.processing.clip_store import save_clips

    parser = argparse.ArgumentParser()
    parser.add_argument("--config", type=str, default=None, help="YAML config file")
    parser.add_argument("--seed", type=int, default=None, help="Dataset seed")
    parser.add_argument("--out", type=str, default=None, help="Output directory")
    args = parser.parse_args()

    cfg = load_config(args.config)
    spec = ToyDatasetSpec.from_config(cfg, seed=args.seed)
    out_dir = Path(args.out or cfg.experiment.out_dir) / "dataset"

    banner(f"TOY DATASET | SEED {spec.seed}")
    if (out_dir / "manifest.json").exists():
        log(f"{out_dir}/manifest.json exists, skipping")
    else:
        dataset = make_toy_dataset(spec)
        for split in ("train", "test"):
            clips = getattr(dataset, split)
            save_clips(tqdm(clips, desc=f"Writing {split}"), out_dir, split)
            log(f"{split}: {len(clips)} clips | per class {dataset.class_counts(split)}")
