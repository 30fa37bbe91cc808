"""Cross-quality patch mixing of HR and SR images on a square grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .seeding import substream
from .tensor import Tensor


@dataclass
class GridMask:
    mask: np.ndarray  # [B,1,H,W], 1 = take HR, 0 = take SR
    cells_per_side: int
    seed: int

    @property
    def n_patches(self) -> int:
        return self.cells_per_side ** 2

    def cells(self) -> np.ndarray:
        """Per-cell values [B, n, n]."""
        B, _, H, W = self.mask.shape
        n = self.cells_per_side
        return self.mask[:, 0, :: H // n, :: W // n]


def make_mask(batch: int, h: int, w: int, n_patches: int = 16, p_hr: float = 0.5,
              seed: int = 0, rng: np.random.Generator | None = None) -> GridMask:
    """Each grid cell of each sample is HR with probability ``p_hr``."""
    n = math.isqrt(n_patches)
    if n * n != n_patches or n < 1:
        raise ValueError(f"n_patches must be a perfect square, got {n_patches}")
    if h % n or w % n:
        raise ValueError(f"{n}x{n} grid does not divide image extents {(h, w)}")
    if not 0.0 <= p_hr <= 1.0:
        raise ValueError(f"p_hr must lie in [0,1], got {p_hr}")
    rng = substream(seed, "cqmix") if rng is None else rng
    cells = (rng.random((batch, n, n)) < p_hr).astype(np.float32)
    mask = np.repeat(np.repeat(cells, h // n, axis=1), w // n, axis=2)[:, None]
    return GridMask(mask, n, seed)


def mix(hr, sr, m: GridMask) -> Tensor:
    """``M * hr + (1 - M) * sr`` with the mask repeated over channels.

    Differentiable in both inputs. Every output pixel is copied from exactly
    one source.
    """
    hr_t = hr if isinstance(hr, Tensor) else Tensor(hr)
    sr_t = sr if isinstance(sr, Tensor) else Tensor(sr)
    if hr_t.shape != sr_t.shape:
        raise ValueError(f"mix shape mismatch: {hr_t.shape} vs {sr_t.shape}")
    B, C, H, W = hr_t.shape
    if m.mask.shape != (B, 1, H, W):
        raise ValueError(f"mask shape {m.mask.shape} does not fit images {hr_t.shape}")
    full = np.repeat(m.mask, C, axis=1)
    if not (hr_t.requires_grad or sr_t.requires_grad):
        return Tensor(np.where(full > 0, hr_t.data, sr_t.data))
    return T.mul(hr_t, Tensor(full)) + T.mul(sr_t, Tensor(1.0 - full))
