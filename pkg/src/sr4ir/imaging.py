"""Fixed image operators: resampling, blur, PSNR and binary PPM I/O.

Images are float arrays shaped [B, C, H, W] (a single [C, H, W] image is
accepted by the PPM writer). All kernels use edge-clamp (replicate)
boundaries.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

HR, LR, SR, AUG = "HR", "LR", "SR", "AUG"
ROLES = (HR, LR, SR, AUG)


@dataclass
class ImageBatch:
    """A [B,3,H,W] batch in [0,1] tagged with where it came from."""

    tensor: np.ndarray
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown image role {self.role!r}")
        if self.tensor.ndim != 4:
            raise ValueError(f"ImageBatch needs [B,C,H,W], got {self.tensor.shape}")

    @property
    def shape(self):
        return self.tensor.shape

    def clamped(self) -> "ImageBatch":
        return ImageBatch(np.clip(self.tensor, 0.0, 1.0), self.role)


@dataclass(frozen=True)
class DegradationConfig:
    scale: int = 4
    blur_std: float | None = None

    def __post_init__(self):
        if self.scale not in (1, 2, 4, 8):
            raise ValueError(f"degradation scale must be one of 1, 2, 4, 8, got {self.scale}")
        if self.blur_std is not None and self.blur_std < 0:
            raise ValueError("blur_std must be >= 0")


def catmull_rom(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _symmetric_taps(step: int, offsets_weights):
    """Group taps into mirror pairs around the output centre.

    Returns ``[(w, m_left, m_right)]`` with ``m_right is None`` for the
    centre tap. Summing each pair before weighting makes the filter
    exactly equivariant to flips.
    """
    by_m = dict(offsets_weights)
    taps, seen = [], set()
    for m in sorted(by_m):
        if m in seen:
            continue
        mirror = step - 1 - m
        seen.update((m, mirror))
        if mirror == m:
            taps.append((by_m[m], m, None))
        else:
            taps.append((by_m[m], m, mirror))
    # largest weights first keeps the accumulation well conditioned
    taps.sort(key=lambda t: -abs(t[0]))
    return taps


def _filter_axis(x: np.ndarray, axis: int, step: int, taps) -> np.ndarray:
    n = x.shape[axis]
    if n % step:
        raise ValueError(f"extent {n} is not divisible by scale {step}")
    base = np.arange(n // step) * step
    out = None
    for w, ml, mr in taps:
        left = np.take(x, np.clip(base + ml, 0, n - 1), axis=axis)
        if mr is not None:
            left = left + np.take(x, np.clip(base + mr, 0, n - 1), axis=axis)
        term = left * x.dtype.type(w)
        out = term if out is None else out + term
    return out


def bicubic_taps(scale: int):
    centre = (scale - 1) / 2
    support = 2 * scale
    ms = range(math.floor(centre - support), math.ceil(centre + support) + 1)
    pairs = [(m, float(catmull_rom((m - centre) / scale))) for m in ms]
    pairs = [(m, w) for m, w in pairs if w != 0.0]
    total = math.fsum(w for _, w in pairs)
    return _symmetric_taps(scale, [(m, w / total) for m, w in pairs])


def bicubic_downsample(img: np.ndarray, scale: int) -> np.ndarray:
    """Antialiased Catmull-Rom (a=-0.5) downsampling by an integer factor."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    H, W = img.shape[-2:]
    if H % scale or W % scale:
        raise ValueError(f"image extents {(H, W)} not divisible by scale {scale}")
    if scale == 1:
        return img.copy()
    taps = bicubic_taps(scale)
    out = _filter_axis(img, img.ndim - 2, scale, taps)
    return _filter_axis(out, img.ndim - 1, scale, taps)


def gaussian_kernel(std: float) -> np.ndarray:
    radius = math.ceil(3 * std)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # vanishing std: side taps underflow to 0
        w = np.exp(-0.5 * (x / std) ** 2)
    return w / w.sum()


def gaussian_blur(img: np.ndarray, std: float) -> np.ndarray:
    if std < 0:
        raise ValueError(f"blur std must be >= 0, got {std}")
    if std == 0:
        return img.copy()
    w = gaussian_kernel(std)
    radius = len(w) // 2
    taps = _symmetric_taps(1, [(m, w[m + radius]) for m in range(-radius, radius + 1)])
    out = _filter_axis(img, img.ndim - 2, 1, taps)
    return _filter_axis(out, img.ndim - 1, 1, taps)


def bilinear_matrix(n_in: int, scale: int) -> np.ndarray:
    """[n_in*scale, n_in] interpolation matrix, half-pixel (align_corners=False)."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    n_out = n_in * scale
    m = np.zeros((n_out, n_in))
    src = np.maximum((np.arange(n_out) + 0.5) / scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def bilinear_upsample(img: np.ndarray, scale: int) -> np.ndarray:
    if scale == 1:
        return img.copy()
    H, W = img.shape[-2:]
    mh = bilinear_matrix(H, scale).astype(img.dtype)
    mw = bilinear_matrix(W, scale).astype(img.dtype)
    return np.matmul(np.matmul(mh, img), mw.T)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB with peak 1.0; ``inf`` when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10 * math.log10(1.0 / mse)


def psnr_per_image(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([psnr(x, y) for x, y in zip(a, b)])


def ppm_write(img: np.ndarray, path) -> None:
    """Write one [3,H,W] (or [1,3,H,W]) image in [0,1] as binary P6."""
    a = np.asarray(img)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError("ppm_write takes a single image")
        a = a[0]
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"expected [3,H,W], got {a.shape}")
    if a.min() < 0 or a.max() > 1:
        raise ValueError("ppm_write expects values in [0,1]")
    q = np.floor(a.astype(np.float64) * 255 + 0.5).astype(np.uint8)
    _, H, W = q.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(q.transpose(1, 2, 0).tobytes())


_TOKEN = re.compile(rb"(#[^\n]*\n|\s+)")


def ppm_read(path) -> np.ndarray:
    """Read a binary P6 file into a [1,3,H,W] float32 array."""
    with open(path, "rb") as f:
        raw = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        m = _TOKEN.match(raw, pos)
        if m:
            pos = m.end()
            continue
        end = pos
        while end < len(raw) and raw[end:end + 1] not in b" \t\r\n#":
            end += 1
        if end == pos:
            raise ValueError("malformed PPM header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM (magic {fields[0]!r})")
    try:
        W, H, maxval = (int(v) for v in fields[1:])
    except ValueError as exc:
        raise ValueError("malformed PPM header") from exc
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval={maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = raw[pos:pos + 3 * W * H]
    if len(payload) != 3 * W * H:
        raise ValueError("truncated PPM payload")
    q = np.frombuffer(payload, dtype=np.uint8).reshape(H, W, 3)
    return (q.transpose(2, 0, 1)[None].astype(np.float32) / 255.0)
