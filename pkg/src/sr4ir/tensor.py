"""Dense tensors with a recording tape for reverse-mode differentiation.

Only the operations needed by the micro networks and losses are provided.
Shapes must match exactly; the single broadcast allowed is the per-channel
bias add inside ``conv2d`` and ``linear``.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import BinaryIO, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "backward", "no_grad", "precision", "get_dtype",
    "is_grad_enabled", "current_tape", "conv2d", "relu", "linear",
    "avg_pool2d", "pixel_shuffle", "pixel_unshuffle", "l1_loss",
    "softmax_cross_entropy", "clamp", "concat", "spatial_mean", "resize",
    "write_snapshot", "read_snapshot", "save_tensor", "load_tensor",
]


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.tape = Tape()


class Tape:
    """Ordered record of differentiable operations.

    Each node is ``(inputs, output, backward_fn)``. Nodes are appended as
    operations execute, so inputs always precede the nodes that consume them.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple["Tensor", ...], "Tensor", Callable]] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs, out, fn) -> int:
        self.nodes.append((inputs, out, fn))
        return len(self.nodes) - 1

    def clear(self):
        for _, out, _ in self.nodes:
            out.node_id = None
        self.nodes = []


_state = _State()


def get_dtype():
    return _state.dtype


def is_grad_enabled() -> bool:
    return _state.grad_enabled


def current_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Switch the default float type, e.g. to float64 for gradient checks."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def use_tape(tape: Tape):
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=_state.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def set_requires_grad(self, flag: bool):
        self.requires_grad = bool(flag)
        self.grad = np.zeros_like(self.data) if flag else None

    def zero_grad(self):
        if self.requires_grad:
            self.grad[...] = 0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mul(tsum(self), 1.0 / self.data.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def backward(self):
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: Sequence[Tensor], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = None
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out.node_id = _state.tape.record(tuple(inputs), out, fn)
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad")
    if loss.node_id is None:
        raise RuntimeError("loss is not on the tape (backward already called?)")
    tape = _state.tape
    if loss.node_id >= len(tape.nodes) or tape.nodes[loss.node_id][1] is not loss:
        raise RuntimeError("loss was recorded on a different tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for idx in range(loss.node_id, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        inputs, _, fn = tape.nodes[idx]
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id is not None:
                if inp.node_id in grads:
                    grads[inp.node_id] = grads[inp.node_id] + gi
                else:
                    grads[inp.node_id] = gi
            else:
                inp.grad += gi
    tape.clear()


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.full(shape, g, dtype=g.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _make(np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool: [B,C,H,W] -> [B,C]."""
    B, C, H, W = x.shape
    scale = x.data.dtype.type(1.0 / (H * W))
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to((g * scale)[:, :, None, None], (B, C, H, W)).copy(),))


# layers ----------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Pixel-major columns: xp [B,Hp,Wp,C] -> [B*Ho*Wo, k*k*C]."""
    B, _, _, C = xp.shape
    cols = np.empty((B, Ho, Wo, k, k, C), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i:i + stride * (Ho - 1) + 1:stride,
                                     j:j + stride * (Wo - 1) + 1:stride]
    return cols.reshape(B * Ho * Wo, k * k * C)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    B, Hp, Wp, C = shape
    cols = cols.reshape(B, Ho, Wo, k, k, C)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * (Ho - 1) + 1:stride,
                j:j + stride * (Wo - 1) + 1:stride] += cols[:, :, :, i, j]
    return out


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded extent {n + 2 * pad}")
    if span % stride:
        raise ValueError(f"extent {n} with pad {pad}, kernel {k}, stride {stride} "
                         "does not tile exactly")
    return span // stride + 1


def _conv_cols(xp, w, k, stride, Ho, Wo, need_x, need_w):
    """im2col form: one [N, k*k*Cin] @ [k*k*Cin, Cout] product."""
    B, Hp, Wp, Cin = xp.shape
    Cout = w.shape[0]
    if k == 1 and stride == 1:
        cols = xp.reshape(B * Hp * Wp, Cin)
    else:
        cols = _im2col(xp, k, stride, Ho, Wo)
    w2 = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(k * k * Cin, Cout)

    def back(g2):
        gp = gw = None
        if need_x:
            gc = g2 @ w2.T
            if k == 1 and stride == 1:
                gp = gc.reshape(xp.shape)
            else:
                gp = _col2im(gc, xp.shape, k, stride, Ho, Wo)
        if need_w:
            gw = np.ascontiguousarray((cols.T @ g2).reshape(k, k, Cin, Cout).transpose(3, 2, 0, 1))
        return gp, gw

    return cols @ w2, back


def _conv_shift(xp, w, k, stride, Ho, Wo, need_x, need_w):
    """Matmul-then-shift form for stride 1: every padded pixel is multiplied by
    all k*k taps at once, then the tap planes are shifted and summed. Moves
    k*k*Cout floats per pixel instead of k*k*Cin, so it wins when Cout < Cin."""
    B, Hp, Wp, Cin = xp.shape
    Cout = w.shape[0]
    x2 = xp.reshape(B * Hp * Wp, Cin)
    wt = np.ascontiguousarray(w.transpose(1, 2, 3, 0)).reshape(Cin, k * k * Cout)
    z = (x2 @ wt).reshape(B, Hp, Wp, k, k, Cout)
    out = np.zeros((B, Ho, Wo, Cout), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += z[:, i:i + Ho, j:j + Wo, i, j]

    def back(g2):
        g4 = g2.reshape(B, Ho, Wo, Cout)
        gz = np.zeros((B, Hp, Wp, k, k, Cout), dtype=g2.dtype)
        for i in range(k):
            for j in range(k):
                gz[:, i:i + Ho, j:j + Wo, i, j] = g4
        gz = gz.reshape(B * Hp * Wp, k * k * Cout)
        gp = (gz @ wt.T).reshape(xp.shape) if need_x else None
        gw = None
        if need_w:
            gw = np.ascontiguousarray((x2.T @ gz).reshape(Cin, k, k, Cout).transpose(3, 0, 1, 2))
        return gp, gw

    return out.reshape(B * Ho * Wo, Cout), back


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, x [B,Cin,H,W] * w [Cout,Cin,k,k] -> [B,Cout,H',W']."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    B, Cin, H, W = x.shape
    Cout, Cw, k, k2 = w.shape
    if Cw != Cin:
        raise ValueError(f"conv2d channel mismatch: input has {Cin}, weight expects {Cw}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if pad < 0 or stride < 1:
        raise ValueError("conv2d needs pad >= 0 and stride >= 1")
    if b is not None and b.shape != (Cout,):
        raise ValueError(f"bias shape {b.shape} does not match {Cout} output channels")
    Ho = _out_extent(H, k, stride, pad)
    Wo = _out_extent(W, k, stride, pad)
    xh = x.data.transpose(0, 2, 3, 1)
    if pad:
        xp = np.zeros((B, H + 2 * pad, W + 2 * pad, Cin), dtype=x.data.dtype)
        xp[:, pad:pad + H, pad:pad + W] = xh
    else:
        xp = np.ascontiguousarray(xh)
    if stride == 1 and k > 1 and Cout < Cin:
        conv = _conv_shift
    else:
        conv = _conv_cols
    out, back = conv(xp, w.data, k, stride, Ho, Wo, x.requires_grad, w.requires_grad)
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
        gp, gw = back(g2)
        gx = gb = None
        if gp is not None:
            if pad:
                gp = gp[:, pad:pad + H, pad:pad + W]
            gx = np.ascontiguousarray(gp.transpose(0, 3, 1, 2))
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make(out, inputs, fn)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """x [B,D] @ W [D,K] + b [K]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match {W.shape[1]} outputs")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data

    def fn(g):
        gx = g @ W.data.T if x.requires_grad else None
        gw = x.data.T @ g if W.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return _make(out, (x, W, b) if b is not None else (x, W), fn)


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    B, C, H, W = x.shape
    Ho = _out_extent(H, k, stride, 0)
    Wo = _out_extent(W, k, stride, 0)
    scale = x.data.dtype.type(1.0 / (k * k))
    if k == stride == 2 and H % 2 == 0 and W % 2 == 0:
        rows = x.data[:, :, 0::2] + x.data[:, :, 1::2]
        out = (rows[:, :, :, 0::2] + rows[:, :, :, 1::2]) * scale

        def tiled(g):
            gx = np.empty_like(x.data)
            gs = g * scale
            for i in (0, 1):
                for j in (0, 1):
                    gx[:, :, i::2, j::2] = gs
            return (gx,)

        return _make(out, (x,), tiled)
    acc = np.zeros((B, C, Ho, Wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            acc += x.data[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]

    def fn(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += gs
        return (gx,)

    return _make(acc * scale, (x,), fn)


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    B, Cr, H, W = a.shape
    C = Cr // (r * r)
    return a.reshape(B, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H * r, W * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    B, C, Hr, Wr = a.shape
    H, W = Hr // r, Wr // r
    return a.reshape(B, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C * r * r, H, W)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: out[b,c,r*i+di,r*j+dj] = x[b, c*r*r + di*r + dj, i, j]."""
    if x.data.ndim != 4 or x.shape[1] % (r * r):
        raise ValueError(f"pixel_shuffle: {x.shape[1]} channels not divisible by {r * r}")
    return _make(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ValueError(f"pixel_unshuffle: extents {x.shape[2:]} not divisible by {r}")
    return _make(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),))


def resize(x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    """Separable linear resampling: out = mh @ x @ mw.T over the last two axes."""
    if x.data.ndim != 4 or mh.shape[1] != x.shape[2] or mw.shape[1] != x.shape[3]:
        raise ValueError(f"resize matrices {mh.shape}, {mw.shape} do not fit {x.shape}")
    mh = mh.astype(x.data.dtype, copy=False)
    mw = mw.astype(x.data.dtype, copy=False)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


# losses --------------------------------------------------------------------

def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; subgradient sign(0) = 0."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ValueError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    val = np.asarray(np.abs(diff).mean(), dtype=diff.dtype)

    def fn(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _make(val, (a, b), fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class.

    ``logits`` is [B,C] with ``labels`` [B], or [B,C,H,W] with ``labels``
    [B,H,W] (per-pixel mean).
    """
    labels = np.asarray(labels)
    z = logits.data
    if z.ndim == 4:
        B, C, H, W = z.shape
        if labels.shape != (B, H, W):
            raise ValueError(f"labels shape {labels.shape} does not match logits {z.shape}")
        flat = z.transpose(0, 2, 3, 1).reshape(-1, C)
    elif z.ndim == 2:
        B, C = z.shape
        if labels.shape != (B,):
            raise ValueError(f"labels shape {labels.shape} does not match logits {z.shape}")
        flat = z
    else:
        raise ValueError(f"logits must be 2-D or 4-D, got {z.shape}")
    y = labels.reshape(-1).astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ValueError(f"label out of range [0, {C})")
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(y.size)
    n = y.size
    val = np.asarray((lse - shifted[rows, y]).mean(), dtype=z.dtype)

    def fn(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, y] -= 1
        p *= g / n
        if z.ndim == 4:
            return (p.reshape(B, H, W, C).transpose(0, 3, 1, 2),)
        return (p,)

    return _make(val, (logits,), fn)


# snapshot file format ----------------------------------------------------------

_MAGIC = b"SR4T"


def write_snapshot(f: BinaryIO, arr) -> None:
    """Little-endian: magic, u32 rank, u32 extents, float32 payload (row-major)."""
    a = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f4")
    f.write(_MAGIC)
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated tensor snapshot")
    return buf


def read_snapshot(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != _MAGIC:
        raise ValueError("bad tensor snapshot magic")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        write_snapshot(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_snapshot(f)
