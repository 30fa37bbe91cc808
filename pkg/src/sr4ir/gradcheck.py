"""Central finite-difference checks for every differentiable op.

Each case builds random float64 inputs (at most 200 elements per tensor),
projects the op output onto a fixed random direction to get a scalar, and
compares the tape gradient with (f(x+h) - f(x-h)) / 2h entry by entry.
The error for one input is ||g_tape - g_fd|| / max(||g_tape||, ||g_fd||, 1e-8);
a case reports the worst input.
"""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .cqmix import make_mask, mix
from .losses import pixel_loss, task_loss, tdp_loss
from .nets import NetConfig, ParamSet, feat_forward, head_forward, init_params, sr_forward, upsample
from .seeding import substream
from .tensor import Tensor

H_STEP = 1e-5
TOLERANCE = 1e-4
MAX_ELEMS = 200


def away_from(rng, shape, points=(0.0,), margin=1e-2, low=-1.0, high=1.0):
    """Uniform samples nudged at least ``margin`` away from each kink."""
    x = rng.uniform(low, high, size=shape)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.where(x[near] >= p, margin, -margin) * 2
    return x


def _params(tensors: dict) -> dict:
    return {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}


def _rand_paramset(ps: ParamSet, rng) -> ParamSet:
    return ParamSet({k: rng.uniform(-0.5, 0.5, size=v.shape) for k, v in ps.items()})


def check(fn, inputs: dict, rng, h: float = H_STEP) -> float:
    """``fn(**tensors) -> Tensor``; returns the worst relative error over inputs."""
    with T.precision(np.float64):
        leaves = _params(inputs)
        out = fn(**leaves)
        proj = rng.standard_normal(out.shape)
        loss = T.tsum(T.mul(out, Tensor(proj))) if out.data.ndim else out
        T.backward(loss)
        analytic = {k: v.grad.copy() for k, v in leaves.items()}

        def value(arrays):
            with T.no_grad():
                o = fn(**{k: Tensor(v) for k, v in arrays.items()})
            return float(np.sum(o.data * proj)) if o.data.ndim else float(o.data)

        worst = 0.0
        base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
        for name, arr in base.items():
            num = np.zeros_like(arr)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = value(base)
                flat[i] = old - h
                down = value(base)
                flat[i] = old
                num.reshape(-1)[i] = (up - down) / (2 * h)
            a = analytic[name]
            denom = max(np.linalg.norm(a), np.linalg.norm(num), 1e-8)
            worst = max(worst, float(np.linalg.norm(a - num) / denom))
        return worst


def _shape(rng, lo=1, hi=4):
    return int(rng.integers(lo, hi + 1))


# case builders: each returns (fn, inputs) for one random draw

def _case_add(rng):
    s = (_shape(rng), _shape(rng, 2, 5), _shape(rng, 2, 5))
    return (lambda a, b: T.add(a, b)), {"a": rng.standard_normal(s), "b": rng.standard_normal(s)}


def _case_add_scalar(rng):
    c = float(rng.standard_normal())
    return (lambda a: T.add(a, c)), {"a": rng.standard_normal((3, _shape(rng, 2, 6)))}


def _case_neg(rng):
    return (lambda a: T.neg(a)), {"a": rng.standard_normal((_shape(rng), 5))}


def _case_mul(rng):
    s = (_shape(rng), _shape(rng, 2, 6))
    return (lambda a, b: T.mul(a, b)), {"a": rng.standard_normal(s), "b": rng.standard_normal(s)}


def _case_mul_scalar(rng):
    c = float(rng.standard_normal())
    return (lambda a: T.mul(a, c)), {"a": rng.standard_normal((4, _shape(rng, 2, 5)))}


def _case_sum(rng):
    return (lambda a: T.tsum(a)), {"a": rng.standard_normal((_shape(rng), 3, 4))}


def _case_reshape(rng):
    return (lambda a: T.reshape(a, (6, -1))), {"a": rng.standard_normal((2, 3, _shape(rng, 1, 5)))}


def _case_relu(rng):
    return (lambda a: T.relu(a)), {"a": away_from(rng, (_shape(rng), 4, 5))}


def _case_clamp(rng):
    return (lambda a: T.clamp(a, 0.0, 1.0)), {"a": away_from(rng, (3, _shape(rng, 2, 8)), (0.0, 1.0),
                                                              low=-0.5, high=1.5)}


def _case_concat(rng):
    axis = int(rng.integers(3))
    s = (2, 3, 2)
    return (lambda a, b: T.concat([a, b], axis=axis)), {"a": rng.standard_normal(s), "b": rng.standard_normal(s)}


def _case_spatial_mean(rng):
    return (lambda a: T.spatial_mean(a)), {"a": rng.standard_normal((2, _shape(rng, 1, 3), 3, 4))}


def _case_conv2d(rng):
    B, Cin, Cout = _shape(rng, 1, 2), _shape(rng, 1, 3), _shape(rng, 1, 3)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2])) if k == 3 else 1
    H = 5 if stride == 2 else _shape(rng, 3, 5)
    pad = k // 2
    return (lambda x, w, b: T.conv2d(x, w, b, stride=stride, pad=pad)), {
        "x": rng.standard_normal((B, Cin, H, H)), "w": rng.standard_normal((Cout, Cin, k, k)),
        "b": rng.standard_normal(Cout)}


def _case_conv2d_shift(rng):
    # Cout < Cin routes stride-1 convs through the matmul-then-shift kernel
    Cin = _shape(rng, 3, 4)
    return (lambda x, w, b: T.conv2d(x, w, b, pad=1)), {
        "x": rng.standard_normal((2, Cin, 4, 4)), "w": rng.standard_normal((Cin - 2, Cin, 3, 3)),
        "b": rng.standard_normal(Cin - 2)}


def _case_linear(rng):
    B, D, K = _shape(rng, 1, 4), _shape(rng, 2, 6), _shape(rng, 2, 5)
    return (lambda x, w, b: T.linear(x, w, b)), {
        "x": rng.standard_normal((B, D)), "w": rng.standard_normal((D, K)), "b": rng.standard_normal(K)}


def _case_avg_pool(rng):
    return (lambda x: T.avg_pool2d(x, 2, 2)), {"x": rng.standard_normal((2, _shape(rng, 1, 3), 4, 6))}


def _case_avg_pool_overlap(rng):
    return (lambda x: T.avg_pool2d(x, 3, 2)), {"x": rng.standard_normal((1, 2, 5, 7))}


def _case_pixel_shuffle(rng):
    return (lambda x: T.pixel_shuffle(x, 2)), {"x": rng.standard_normal((2, 4 * _shape(rng, 1, 2), 2, 3))}


def _case_pixel_unshuffle(rng):
    return (lambda x: T.pixel_unshuffle(x, 2)), {"x": rng.standard_normal((2, _shape(rng, 1, 2), 4, 6))}


def _case_resize(rng):
    return (lambda x: upsample(x, 2)), {"x": rng.standard_normal((2, _shape(rng, 1, 2), 3, 4))}


def _case_l1(rng):
    a = rng.standard_normal((2, 3, 4))
    b = a + away_from(rng, a.shape, margin=0.05)
    return (lambda a, b: T.l1_loss(a, b)), {"a": a, "b": b}


def _case_ce(rng):
    B, C = _shape(rng, 2, 6), _shape(rng, 2, 6)
    y = rng.integers(0, C, size=B)
    return (lambda z: T.softmax_cross_entropy(z, y)), {"z": 3 * rng.standard_normal((B, C))}


def _case_ce_dense(rng):
    C = _shape(rng, 2, 4)
    y = rng.integers(0, C, size=(2, 3, 3))
    return (lambda z: task_loss(z, y, "segmentation")), {"z": rng.standard_normal((2, C, 3, 3))}


def _sr_inputs(rng, scale):
    cfg = NetConfig(sr_channels=3, sr_blocks=1, scale=scale, feat_channels=3, feat_stages=1, num_classes=3)
    sr, feat, head = init_params(cfg, int(rng.integers(1 << 30)))
    return cfg, _rand_paramset(sr, rng), _rand_paramset(feat, rng), _rand_paramset(head, rng)


def _case_sr_forward(rng):
    _, sr, _, _ = _sr_inputs(rng, int(rng.choice([2, 4])))
    names = list(sr)
    lr = rng.uniform(0, 1, size=(1, 3, 2, 2))

    def fn(lr, **p):
        return sr_forward(ParamSet(p), lr, clamp=False)

    return fn, {"lr": lr, **{k: sr[k].data for k in names}}


def _case_feat_head(rng):
    _, _, feat, head = _sr_inputs(rng, 2)

    def fn(img, **p):
        fp = ParamSet({k[5:]: v for k, v in p.items() if k.startswith("feat.")})
        hp = ParamSet({k[5:]: v for k, v in p.items() if k.startswith("head.")})
        return head_forward(hp, feat_forward(fp, img))

    inputs = {"img": rng.uniform(0, 1, size=(2, 3, 4, 4))}
    inputs.update({f"feat.{k}": v.data for k, v in feat.items()})
    inputs.update({f"head.{k}": v.data for k, v in head.items()})
    return fn, inputs


def _case_seg_head(rng):
    cfg = NetConfig(feat_channels=3, feat_stages=1, num_classes=3, task_kind="segmentation")
    _, _, head = init_params(cfg, int(rng.integers(1 << 30)))
    head = _rand_paramset(head, rng)

    def fn(f, **p):
        return head_forward(ParamSet(p), f, (4, 4))

    return fn, {"f": rng.standard_normal((2, 3, 2, 2)), **{k: v.data for k, v in head.items()}}


def _case_tdp(rng):
    _, _, feat, _ = _sr_inputs(rng, 2)
    feat.freeze()
    hr = rng.uniform(0, 1, size=(2, 3, 4, 4))
    return (lambda sr: tdp_loss(feat, sr, hr)), {"sr": hr + away_from(rng, hr.shape, margin=0.05) * 0.2}


def _case_pixel_loss(rng):
    hr = rng.uniform(0, 1, size=(2, 3, 4, 4))
    return (lambda sr: pixel_loss(sr, hr)), {"sr": hr + away_from(rng, hr.shape, margin=0.05) * 0.2}


def _case_mix(rng):
    m = make_mask(2, 4, 4, n_patches=4, p_hr=0.5, rng=rng)
    return (lambda hr, sr: mix(hr, sr, m)), {"hr": rng.uniform(0, 1, (2, 3, 4, 4)),
                                             "sr": rng.uniform(0, 1, (2, 3, 4, 4))}


CASES = {
    "add": _case_add, "add_scalar": _case_add_scalar, "neg": _case_neg, "mul": _case_mul,
    "mul_scalar": _case_mul_scalar, "sum": _case_sum, "reshape": _case_reshape, "relu": _case_relu,
    "clamp": _case_clamp, "concat": _case_concat, "spatial_mean": _case_spatial_mean,
    "conv2d": _case_conv2d, "conv2d_shift": _case_conv2d_shift, "linear": _case_linear,
    "avg_pool2d": _case_avg_pool, "avg_pool2d_overlap": _case_avg_pool_overlap,
    "pixel_shuffle": _case_pixel_shuffle, "pixel_unshuffle": _case_pixel_unshuffle,
    "bilinear_resize": _case_resize, "l1_loss": _case_l1, "softmax_ce": _case_ce,
    "softmax_ce_dense": _case_ce_dense, "pixel_loss": _case_pixel_loss, "tdp_loss": _case_tdp,
    "cqmix_mix": _case_mix, "sr_forward": _case_sr_forward, "feat_head": _case_feat_head,
    "seg_head": _case_seg_head,
}

COMPOSITE = ("pixel_loss", "tdp_loss", "cqmix_mix", "sr_forward", "feat_head", "seg_head")


def run_suite(seeds=(0, 1, 2, 3, 4), names=None, verbose: bool = False) -> dict:
    """op name -> worst relative error over ``seeds``."""
    results = {}
    for name in names or CASES:
        worst = 0.0
        for seed in seeds:
            rng = substream(seed, "gradcheck", name)
            fn, inputs = CASES[name](rng)
            for k, v in inputs.items():
                if k in ("x", "a", "z", "img", "lr", "f", "sr", "hr") and np.size(v) > MAX_ELEMS:
                    raise AssertionError(f"{name}: input {k} has {np.size(v)} > {MAX_ELEMS} elements")
            worst = max(worst, check(fn, inputs, rng))
        results[name] = worst
        if verbose:
            flag = "ok" if worst < TOLERANCE else "FAIL"
            print(f"{name:20s} max rel err {worst:.2e}  {flag}", flush=True)
    return results


def main(verbose: bool = True) -> int:
    t = time.time()
    res = run_suite(verbose=verbose)
    bad = [k for k, v in res.items() if not v < TOLERANCE]
    print(f"{len(res)} ops, {len(bad)} failing, {time.time() - t:.1f}s")
    return 1 if bad else 0
