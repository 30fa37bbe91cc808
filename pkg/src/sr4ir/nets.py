"""Micro super-resolution network, feature extractor and task heads.

All three are pure functions of ``(ParamSet, input)``. Parameter names are
stable and are what the checkpoint format stores.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache
from typing import BinaryIO

import numpy as np

from . import tensor as T
from .imaging import bilinear_matrix
from .seeding import substream
from .tensor import Tensor

CLASSIFICATION = "classification"
SEGMENTATION = "segmentation"


@dataclass(frozen=True)
class NetConfig:
    sr_channels: int = 16
    sr_blocks: int = 4
    scale: int = 4
    feat_channels: int = 32
    feat_stages: int = 3
    num_classes: int = 8
    task_kind: str = CLASSIFICATION

    def __post_init__(self):
        if self.scale not in (1, 2, 4, 8):
            raise ValueError(f"net.scale must be one of 1, 2, 4, 8, got {self.scale}")
        for name in ("sr_channels", "sr_blocks", "feat_channels", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"net.{name} must be >= 1")
        if self.feat_stages < 0:
            raise ValueError("net.feat_stages must be >= 0")
        if self.task_kind not in (CLASSIFICATION, SEGMENTATION):
            raise ValueError(f"net.task_kind must be classification or segmentation, got {self.task_kind!r}")


class ParamSet:
    """Ordered name -> Tensor mapping with a frozen flag.

    Freezing turns off ``requires_grad`` on every entry, so no gradient can
    reach it and the optimizers skip it.
    """

    def __init__(self, entries=None, frozen: bool = False):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.frozen = False
        for name, value in (entries or {}).items():
            t = value if isinstance(value, Tensor) else Tensor(value)
            if not t.requires_grad:
                t.set_requires_grad(True)
            self.entries[name] = t
        if frozen:
            self.freeze()

    def __getitem__(self, name) -> Tensor:
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def freeze(self):
        if not self.frozen:
            for t in self.entries.values():
                t.set_requires_grad(False)
            self.frozen = True
        return self

    def unfreeze(self):
        if self.frozen:
            for t in self.entries.values():
                t.set_requires_grad(True)
            self.frozen = False
        return self

    def zero_grad(self):
        for t in self.entries.values():
            t.zero_grad()

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.entries.items())

    def load_arrays(self, arrays):
        if list(arrays) != list(self.entries):
            raise ValueError("parameter names do not match")
        for k, v in arrays.items():
            if v.shape != self.entries[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.entries[k].shape}")
            self.entries[k].data[...] = v

    def copy(self, frozen: bool | None = None) -> "ParamSet":
        out = ParamSet(self.arrays())
        if self.frozen if frozen is None else frozen:
            out.freeze()
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.entries.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def num_params(self) -> int:
        return sum(t.size for t in self.entries.values())


def _kaiming(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_param(rng, cout, cin, k):
    return _kaiming(rng, (cout, cin, k, k), cin * k * k), np.zeros(cout)


def _up_stages(scale: int) -> int:
    n = int(round(np.log2(scale)))
    if 2 ** n != scale:
        raise ValueError(f"scale {scale} is not a power of two")
    return n


def init_sr(cfg: NetConfig, rng) -> ParamSet:
    C = cfg.sr_channels
    p = OrderedDict()
    p["head.w"], p["head.b"] = _conv_param(rng, C, 3, 3)
    for i in range(cfg.sr_blocks):
        p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"] = _conv_param(rng, C, C, 3)
        p[f"block{i}.conv2.w"], p[f"block{i}.conv2.b"] = _conv_param(rng, C, C, 3)
    for j in range(_up_stages(cfg.scale)):
        p[f"up{j}.w"], p[f"up{j}.b"] = _conv_param(rng, 4 * C, C, 3)
    p["tail.w"], p["tail.b"] = np.zeros((3, C, 3, 3)), np.zeros(3)
    return ParamSet(p)


def init_feat(cfg: NetConfig, rng) -> ParamSet:
    p = OrderedDict()
    cin = 3
    for i in range(cfg.feat_stages):
        p[f"stage{i}.w"], p[f"stage{i}.b"] = _conv_param(rng, cfg.feat_channels, cin, 3)
        cin = cfg.feat_channels
    return ParamSet(p)


def init_head(cfg: NetConfig, rng) -> ParamSet:
    cf = cfg.feat_channels if cfg.feat_stages else 3
    p = OrderedDict()
    if cfg.task_kind == CLASSIFICATION:
        p["fc.w"] = _kaiming(rng, (cf, cfg.num_classes), cf)
        p["fc.b"] = np.zeros(cfg.num_classes)
    else:
        p["cls.w"], p["cls.b"] = _conv_param(rng, cfg.num_classes, cf, 1)
    return ParamSet(p)


def init_params(cfg: NetConfig, seed: int):
    """Returns ``(sr, feat, head)`` parameter sets, deterministic in ``seed``."""
    return (init_sr(cfg, substream(seed, "init", "sr")),
            init_feat(cfg, substream(seed, "init", "feat")),
            init_head(cfg, substream(seed, "init", "head")))


@lru_cache(maxsize=64)
def _bilinear(n: int, scale: int) -> np.ndarray:
    m = bilinear_matrix(n, scale)
    m.setflags(write=False)
    return m


def upsample(x: Tensor, scale: int) -> Tensor:
    """Differentiable bilinear upsampling (half-pixel convention)."""
    if scale == 1:
        return x
    H, W = x.shape[2:]
    return T.resize(x, _bilinear(H, scale), _bilinear(W, scale))


def sr_scale(params: ParamSet) -> int:
    return 2 ** sum(1 for k in params if k.startswith("up") and k.endswith(".w"))


def sr_forward(params: ParamSet, lr, clamp: bool = True, scale: int | None = None) -> Tensor:
    """LR [B,3,h,w] -> SR [B,3,s*h,s*w].

    head conv, residual blocks, x2 pixel-shuffle stages, tail conv, plus a
    bilinear skip from the input. The tail starts at zero so an untrained
    network returns the bilinear upsample.
    """
    x_in = lr if isinstance(lr, Tensor) else Tensor(lr)
    s = sr_scale(params)
    if scale is not None and scale != s:
        raise ValueError(f"SR parameters upsample by {s}, asked for {scale}")
    skip = upsample(x_in, s) if s > 1 else x_in
    x = T.conv2d(x_in, params["head.w"], params["head.b"], pad=1)
    i = 0
    while f"block{i}.conv1.w" in params:
        r = T.relu(T.conv2d(x, params[f"block{i}.conv1.w"], params[f"block{i}.conv1.b"], pad=1))
        x = x + T.conv2d(r, params[f"block{i}.conv2.w"], params[f"block{i}.conv2.b"], pad=1)
        i += 1
    j = 0
    while f"up{j}.w" in params:
        x = T.pixel_shuffle(T.conv2d(x, params[f"up{j}.w"], params[f"up{j}.b"], pad=1), 2)
        j += 1
    out = T.conv2d(x, params["tail.w"], params["tail.b"], pad=1) + skip
    return T.clamp(out, 0.0, 1.0) if clamp else out


def feat_stages(params: ParamSet) -> int:
    return sum(1 for k in params if k.startswith("stage") and k.endswith(".w"))


# pixel statistics of the texture dataset (mean 0.50, std 0.21)
INPUT_MEAN = 0.5
INPUT_STD = 0.25  # a little above the measured std; 0.5 and 0.15 both trained slower


def feat_forward(params: ParamSet, img, stages: int | None = None) -> Tensor:
    """Stacked conv-relu-avgpool stages on centred input.

    Returns the final feature map, or the map after the first ``stages``
    stages when given.
    """
    x = img if isinstance(img, Tensor) else Tensor(img)
    total = feat_stages(params)
    n = total if stages is None else stages
    if not 0 <= n <= total:
        raise ValueError(f"stages must lie in [0, {total}], got {n}")
    H, W = x.shape[2:]
    if H % (2 ** n) or W % (2 ** n):
        raise ValueError(f"image extents {(H, W)} not divisible by {2 ** n}")
    if n:
        # roughly unit-variance input; the 0-stage identity extractor skips this
        x = T.mul(T.add(x, -INPUT_MEAN), 1.0 / INPUT_STD)
    for i in range(n):
        x = T.relu(T.conv2d(x, params[f"stage{i}.w"], params[f"stage{i}.b"], pad=1))
        x = T.avg_pool2d(x, 2, 2)
    return x


def head_forward(params: ParamSet, feat: Tensor, out_size: tuple[int, int] | None = None) -> Tensor:
    """Classification logits [B,K], or segmentation logits [B,K,H,W].

    Segmentation needs ``out_size`` (the input image extents) to upsample to.
    """
    if "fc.w" in params:
        if feat.shape[1] != params["fc.w"].shape[0]:
            raise ValueError(f"head expects {params['fc.w'].shape[0]} channels, got {feat.shape[1]}")
        return T.linear(T.spatial_mean(feat), params["fc.w"], params["fc.b"])
    if feat.shape[1] != params["cls.w"].shape[1]:
        raise ValueError(f"head expects {params['cls.w'].shape[1]} channels, got {feat.shape[1]}")
    if out_size is None:
        raise ValueError("segmentation head needs the output size")
    logits = T.conv2d(feat, params["cls.w"], params["cls.b"])
    factor = out_size[0] // feat.shape[2]
    if factor * feat.shape[2] != out_size[0] or factor * feat.shape[3] != out_size[1]:
        raise ValueError(f"cannot upsample {feat.shape[2:]} to {out_size}")
    return upsample(logits, factor)


def task_forward(feat_params: ParamSet, head_params: ParamSet, img):
    """Returns ``(features, logits)`` for the composed task network."""
    x = img if isinstance(img, Tensor) else Tensor(img)
    f = feat_forward(feat_params, x)
    return f, head_forward(head_params, f, x.shape[2:])


# checkpoint container -----------------------------------------------------

_CKPT_MAGIC = b"SR4C"


def write_entries(f: BinaryIO, entries) -> None:
    """``SR4C``, u32 count, then (u16 name length, name, tensor snapshot) each."""
    f.write(_CKPT_MAGIC)
    f.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        T.write_snapshot(f, arr)


def read_entries(f: BinaryIO) -> "OrderedDict[str, np.ndarray]":
    magic = f.read(4)
    if magic != _CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    head = f.read(4)
    if len(head) != 4:
        raise ValueError("truncated checkpoint")
    (count,) = struct.unpack("<I", head)
    out = OrderedDict()
    for _ in range(count):
        raw = f.read(2)
        if len(raw) != 2:
            raise ValueError("truncated checkpoint")
        (n,) = struct.unpack("<H", raw)
        name = f.read(n)
        if len(name) != n:
            raise ValueError("truncated checkpoint")
        out[name.decode("utf-8")] = T.read_snapshot(f)
    return out


def save_params(path, **sets: ParamSet) -> None:
    entries = OrderedDict()
    for prefix, ps in sets.items():
        for k, v in ps.items():
            entries[f"{prefix}/{k}"] = v.data
    with open(path, "wb") as f:
        write_entries(f, entries)


def load_params(path) -> dict[str, ParamSet]:
    with open(path, "rb") as f:
        entries = read_entries(f)
    groups: dict[str, OrderedDict] = {}
    for name, arr in entries.items():
        prefix, _, key = name.partition("/")
        groups.setdefault(prefix, OrderedDict())[key] = arr
    return {k: ParamSet(v) for k, v in groups.items()}
