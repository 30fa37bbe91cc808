"""Procedural texture-recognition dataset and HR/LR pair construction.

Each image is a random background with one disk or square filled by an
oriented stripe texture. The class is the stripe period, and the shortest
periods sit above the LR Nyquist limit, so downsampling removes exactly the
detail that identifies the class.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .imaging import HR, LR, DegradationConfig, ImageBatch, bicubic_downsample, gaussian_blur, ppm_write
from .nets import CLASSIFICATION, SEGMENTATION
from .seeding import substream

TRAIN, TEST = "train", "test"

# alternating short/long so class 0 and class 1 sit on opposite sides of the
# x4 LR Nyquist period (8 px). The short periods stay above 4.5 px: finer
# stripes are erased outright by the bicubic kernel, leaving nothing for SR.
DEFAULT_PERIODS = (5.0, 10.0, 5.8, 13.0, 6.6, 17.0, 7.5, 22.0)


def default_periods(num_classes: int, scale: int = 4) -> tuple[float, ...]:
    """Periods tuned for x4, stretched linearly for other scales."""
    if num_classes <= len(DEFAULT_PERIODS):
        base = DEFAULT_PERIODS[:num_classes]
    else:
        short = np.geomspace(5.0, 7.5, (num_classes + 1) // 2)
        long = np.geomspace(10.0, 24.0, num_classes // 2)
        out = [0.0] * num_classes
        out[0::2] = short
        out[1::2] = long
        base = out
    f = max(scale, 2) / 4
    return tuple(round(float(v) * f, 3) for v in base)


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    image_size: int = 64
    train_count: int = 2000
    test_count: int = 500
    stripe_periods: tuple[float, ...] = ()
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    contrast: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if not self.stripe_periods:
            object.__setattr__(self, "stripe_periods", default_periods(self.num_classes, self.degradation.scale))
        periods = tuple(float(p) for p in self.stripe_periods)
        object.__setattr__(self, "stripe_periods", periods)
        if self.num_classes < 2:
            raise ValueError("data.num_classes must be >= 2")
        if len(periods) != self.num_classes:
            raise ValueError(f"data.stripe_periods needs {self.num_classes} entries, got {len(periods)}")
        if len(set(periods)) != len(periods):
            raise ValueError("data.stripe_periods must be distinct per class")
        if min(periods) <= 2.0:
            raise ValueError("stripe periods must exceed 2 px (HR Nyquist)")
        scale = self.degradation.scale
        if scale > 1 and min(periods) >= 2 * scale:
            raise ValueError(f"shortest stripe period must be < {2 * scale} px for scale {scale}")
        if self.image_size % scale:
            raise ValueError(f"image_size {self.image_size} not divisible by scale {scale}")
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("split sizes must be >= 1")

    def split_count(self, split: str) -> int:
        if split == TRAIN:
            return self.train_count
        if split == TEST:
            return self.test_count
        raise ValueError(f"unknown split {split!r}")

    def split_seed(self, split: str) -> int:
        """Seed for one split; the split name is mixed in so streams never collide."""
        self.split_count(split)
        return int(substream(self.seed, "split", split).integers(0, 2 ** 63))


@dataclass
class Sample:
    hr: ImageBatch
    label: int
    seg: np.ndarray  # [H,W] int: 0 background, label+1 inside the shape
    generic_label: int  # task-irrelevant labelling: shape kind x dominant background channel
    seed: int


def class_orientations(num_classes: int, label: int) -> np.ndarray:
    offset = label * math.pi / (4 * num_classes)
    return offset + np.arange(4) * math.pi / 4


def stripe_texture(size: int, period: float, angle: float, phase: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    u = x * math.cos(angle) + y * math.sin(angle)
    return np.cos(2 * math.pi * u / period + phase)


def gen_sample(spec: DatasetSpec, index: int, split_seed: int) -> Sample:
    rng = substream(split_seed, index)
    S = spec.image_size
    label = index % spec.num_classes

    bg = rng.uniform(0.15, 0.85, size=3)
    gy, gx = rng.uniform(-0.1, 0.1, size=2)
    y, x = np.mgrid[0:S, 0:S].astype(np.float64) / S - 0.5
    background = bg[:, None, None] + (gy * y + gx * x)[None]

    square = bool(rng.integers(2))
    area = rng.uniform(0.27, 0.48) * S * S
    if square:
        side = math.sqrt(area)
        half = side / 2
    else:
        radius = math.sqrt(area / math.pi)
        half = radius
    cy, cx = rng.uniform(half, S - half, size=2)
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    if square:
        inside = (np.abs(yy - cy) < half) & (np.abs(xx - cx) < half)
    else:
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 < half * half

    angle = float(rng.choice(class_orientations(spec.num_classes, label)))
    phase = rng.uniform(0, 2 * math.pi)
    tex = stripe_texture(S, spec.stripe_periods[label], angle, phase)
    mid = rng.uniform(0.35, 0.65, size=3)
    direction = rng.choice([-1.0, 1.0], size=3) * rng.uniform(0.6, 1.0, size=3)
    fg = mid[:, None, None] + spec.contrast * direction[:, None, None] * tex[None]

    img = np.where(inside[None], fg, background)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[None]
    seg = np.where(inside, label + 1, 0).astype(np.int64)
    generic = int(square) * 3 + int(np.argmax(bg))
    return Sample(ImageBatch(img, HR), label, seg, generic, split_seed)


def make_pair(hr, deg: DegradationConfig):
    """Returns ``(lr, hr)``: optional Gaussian blur, then bicubic downsampling."""
    arr = hr.tensor if isinstance(hr, ImageBatch) else hr
    x = gaussian_blur(arr, deg.blur_std) if deg.blur_std else arr
    lr = bicubic_downsample(x, deg.scale)
    return ImageBatch(lr, LR), ImageBatch(arr, HR)


@dataclass
class SplitArrays:
    hr: np.ndarray  # [N,3,H,W]
    lr: np.ndarray  # [N,3,H/s,W/s]
    label: np.ndarray  # [N]
    seg: np.ndarray  # [N,H,W]
    generic: np.ndarray  # [N]

    def __len__(self):
        return len(self.label)

    def targets(self, task_kind: str) -> np.ndarray:
        return self.seg if task_kind == SEGMENTATION else self.label


@lru_cache(maxsize=8)
def load_split(spec: DatasetSpec, split: str) -> SplitArrays:
    """Generate a whole split in memory; cached per (spec, split)."""
    n = spec.split_count(split)
    seed = spec.split_seed(split)
    samples = [gen_sample(spec, i, seed) for i in range(n)]
    hr = np.concatenate([s.hr.tensor for s in samples])
    lr, _ = make_pair(hr, spec.degradation)
    out = SplitArrays(hr=hr, lr=lr.tensor.astype(np.float32),
                      label=np.array([s.label for s in samples], dtype=np.int64),
                      seg=np.stack([s.seg for s in samples]),
                      generic=np.array([s.generic_label for s in samples], dtype=np.int64))
    for a in (out.hr, out.lr, out.label, out.seg, out.generic):
        a.setflags(write=False)
    return out


def epoch_order(n: int, epoch_seed: int | None) -> np.ndarray:
    if epoch_seed is None:
        return np.arange(n)
    return substream(epoch_seed, "shuffle").permutation(n)


def batch_iter(spec: DatasetSpec, split: str, batch_size: int, epoch_seed: int | None = None,
               task_kind: str = CLASSIFICATION, drop_last: bool | None = None,
               labels: str | None = None):
    """Yields ``(lr, hr, y)`` arrays.

    Training (``split == "train"``) drops the final partial batch; evaluation
    keeps it. ``labels="generic"`` swaps in the task-irrelevant labelling.
    """
    data = load_split(spec, split)
    n = len(data)
    if n == 0:
        raise ValueError("empty split")
    if batch_size < 1 or batch_size > n:
        raise ValueError(f"batch_size {batch_size} must be in [1, {n}]")
    if drop_last is None:
        drop_last = split == TRAIN
    y_all = data.generic if labels == "generic" else data.targets(task_kind)
    order = epoch_order(n, epoch_seed)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        yield data.lr[idx], data.hr[idx], y_all[idx]


def steps_per_epoch(spec: DatasetSpec, batch_size: int) -> int:
    return spec.train_count // batch_size


def dump_dataset(spec: DatasetSpec, out_dir) -> str:
    """Write every HR image as PPM plus ``manifest.txt`` (index label path)."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for split in (TRAIN, TEST):
        sub = os.path.join(out_dir, split)
        os.makedirs(sub, exist_ok=True)
        data = load_split(spec, split)
        for i in range(len(data)):
            rel = f"{split}/{i:05d}.ppm"
            ppm_write(data.hr[i], os.path.join(out_dir, rel))
            lines.append(f"{split}:{i} {int(data.label[i])} {rel}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("\n".join(lines) + "\n")
    return manifest
