import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sr4ir import tensor as T
from sr4ir.cqmix import make_mask, mix
from sr4ir.tensor import Tensor


def cell_constant(m):
    B, _, H, W = m.mask.shape
    n = m.cells_per_side
    blocks = m.mask[:, 0].reshape(B, n, H // n, n, W // n)
    return bool((blocks == blocks[:, :, :1, :, :1]).all())


def test_p_extremes():
    assert make_mask(3, 8, 8, 16, p_hr=1.0, seed=1).mask.all()
    assert not make_mask(3, 8, 8, 16, p_hr=0.0, seed=1).mask.any()


def test_cell_frequency_binomial():
    m = make_mask(10000, 4, 4, 16, p_hr=0.5, seed=2)
    freq = m.cells().mean(axis=0)
    assert freq.shape == (4, 4)
    assert (freq >= 0.48).all() and (freq <= 0.52).all()


def test_mask_errors_and_determinism():
    with pytest.raises(ValueError, match="square"):
        make_mask(1, 8, 8, 12)
    with pytest.raises(ValueError, match="divide"):
        make_mask(1, 10, 8, 16)
    with pytest.raises(ValueError):
        make_mask(1, 8, 8, 16, p_hr=1.5)
    a, b = make_mask(4, 8, 8, 16, seed=3), make_mask(4, 8, 8, 16, seed=3)
    assert np.array_equal(a.mask, b.mask) and a.mask.shape == (4, 1, 8, 8)


def test_masks_differ_across_samples():
    m = make_mask(64, 8, 8, 16, seed=4)
    assert len({m.mask[i].tobytes() for i in range(64)}) > 1


def test_mix_all_ones_all_zeros():
    rng = np.random.default_rng(5)
    hr, sr = rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))
    assert np.array_equal(mix(hr, sr, make_mask(2, 8, 8, 4, p_hr=1.0)).data, hr.astype(np.float32))
    assert np.array_equal(mix(hr, sr, make_mask(2, 8, 8, 4, p_hr=0.0)).data, sr.astype(np.float32))


def test_mix_checkerboard_oracle():
    m = make_mask(1, 4, 4, 4, p_hr=0.5, seed=0)
    m.mask[:] = 0
    m.mask[0, 0, :2, :2] = 1
    m.mask[0, 0, 2:, 2:] = 1
    hr = np.full((1, 3, 4, 4), 0.9)
    sr = np.full((1, 3, 4, 4), 0.1)
    out = mix(hr, sr, m).data
    for y in range(4):
        for x in range(4):
            want = 0.9 if (y < 2) == (x < 2) else 0.1
            assert np.allclose(out[0, :, y, x], want)


def test_mix_differentiable_both_inputs():
    m = make_mask(1, 4, 4, 4, seed=6)
    hr = Tensor(np.random.default_rng(6).random((1, 3, 4, 4)), requires_grad=True)
    sr = Tensor(np.random.default_rng(7).random((1, 3, 4, 4)), requires_grad=True)
    T.backward(T.tsum(mix(hr, sr, m)))
    full = np.repeat(m.mask, 3, axis=1)
    assert np.array_equal(hr.grad, full) and np.array_equal(sr.grad, 1 - full)


def test_mix_shape_errors():
    m = make_mask(1, 4, 4, 4)
    with pytest.raises(ValueError):
        mix(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 8)), m)
    with pytest.raises(ValueError):
        mix(np.zeros((2, 3, 4, 4)), np.zeros((2, 3, 4, 4)), m)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32), st.sampled_from([1, 4, 16, 64]), st.floats(0, 1))
def test_mix_properties(seed, n_patches, p):
    rng = np.random.default_rng(seed)
    hr = rng.random((2, 3, 16, 16)).astype(np.float32)
    sr = rng.random((2, 3, 16, 16)).astype(np.float32)
    m = make_mask(2, 16, 16, n_patches, p, seed=seed)
    assert cell_constant(m)
    out = mix(hr, sr, m).data
    from_hr, from_sr = out == hr, out == sr
    assert (from_hr | from_sr).all()  # no blending
    assert np.array_equal(mix(hr, hr, m).data, hr)  # idempotent on equal inputs
    n = m.cells_per_side
    src = np.where(hr != sr, from_hr, True).all(axis=1)  # pixel taken from HR where the sources differ
    assert np.array_equal(src, m.mask[:, 0] > 0) or (hr == sr).any()
    blocks = m.mask[:, 0].reshape(2, n, 16 // n, n, 16 // n)
    assert set(np.unique(blocks)) <= {0.0, 1.0}
