import numpy as np
import pytest

from sr4ir.data import (TEST, TRAIN, DatasetSpec, batch_iter, dump_dataset, epoch_order, gen_sample, load_split,
                        make_pair, steps_per_epoch)
from sr4ir.imaging import DegradationConfig, bicubic_downsample, gaussian_blur

SMALL = DatasetSpec(train_count=40, test_count=13, image_size=32)


def high_band_energy(img, cutoff):
    """Spectral energy above a radial frequency (cycles per HR pixel), DC removed per channel."""
    x = img - img.mean(axis=(-2, -1), keepdims=True)
    f = np.fft.fftfreq(img.shape[-1])
    r = np.hypot(f[:, None], f[None, :])
    return float((np.abs(np.fft.fft2(x)) ** 2)[..., r > cutoff].sum())


def test_sample_deterministic():
    seed = SMALL.split_seed(TRAIN)
    a, b = gen_sample(SMALL, 5, seed), gen_sample(SMALL, 5, seed)
    assert np.array_equal(a.hr.tensor, b.hr.tensor) and np.array_equal(a.seg, b.seg)
    assert not np.array_equal(a.hr.tensor, gen_sample(SMALL, 6, seed).hr.tensor)


def test_sample_label_and_foreground_fraction():
    spec = DatasetSpec(train_count=64, test_count=1)
    seed = spec.split_seed(TRAIN)
    for i in range(64):
        s = gen_sample(spec, i, seed)
        assert 0 <= s.label < spec.num_classes
        assert s.seg.shape == (64, 64)
        assert set(np.unique(s.seg)) <= {0, s.label + 1}
        frac = (s.seg > 0).mean()
        assert 0.25 <= frac <= 0.50, frac
        assert s.hr.tensor.min() >= 0 and s.hr.tensor.max() <= 1


def test_fft_separability_oracle():
    # class 0 carries short stripes, class 1 long ones; above the x4 LR Nyquist
    # (1/8 cycle per HR pixel) their energies must differ by more than 3x
    spec = DatasetSpec(train_count=160, test_count=1)
    d = load_split(spec, TRAIN)
    e = {c: np.mean([high_band_energy(d.hr[i], 1 / 8) for i in np.flatnonzero(d.label == c)]) for c in (0, 1)}
    assert e[0] > 3 * e[1]


def test_spec_invariants():
    with pytest.raises(ValueError, match="distinct"):
        DatasetSpec(num_classes=2, stripe_periods=(5.0, 5.0))
    with pytest.raises(ValueError, match="shortest"):
        DatasetSpec(num_classes=2, stripe_periods=(9.0, 12.0))
    with pytest.raises(ValueError):
        DatasetSpec(num_classes=3, stripe_periods=(5.0, 12.0))
    for s in (2, 4, 8):
        spec = DatasetSpec(degradation=DegradationConfig(scale=s))
        assert min(spec.stripe_periods) < 2 * s
    assert len(set(DatasetSpec(num_classes=12).stripe_periods)) == 12


def test_make_pair_identity_constant_and_order():
    hr = np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32)
    lr, back = make_pair(hr, DegradationConfig(scale=1))
    assert np.array_equal(lr.tensor, hr) and lr.role == "LR" and back.role == "HR"
    lr, _ = make_pair(np.full((1, 3, 16, 16), 0.4), DegradationConfig(scale=4, blur_std=1.2))
    assert np.allclose(lr.tensor, 0.4, atol=1e-6)
    imp = np.zeros((1, 1, 32, 32))
    imp[0, 0, 13, 18] = 1.0
    deg = DegradationConfig(scale=4, blur_std=1.5)
    blur_first = make_pair(imp, deg)[0].tensor
    assert np.allclose(blur_first, bicubic_downsample(gaussian_blur(imp, 1.5), 4))
    assert not np.allclose(blur_first, gaussian_blur(bicubic_downsample(imp, 4), 1.5))


def test_split_extents_and_disjointness():
    tr, te = load_split(SMALL, TRAIN), load_split(SMALL, TEST)
    assert tr.hr.shape == (40, 3, 32, 32) and tr.lr.shape == (40, 3, 8, 8)
    assert SMALL.split_seed(TRAIN) != SMALL.split_seed(TEST)
    assert not np.array_equal(tr.hr[:13], te.hr)


def test_regeneration_bit_exact():
    spec = DatasetSpec(train_count=7, test_count=3, image_size=16, seed=42)
    a = load_split(spec, TRAIN).hr.copy()
    load_split.cache_clear()
    assert np.array_equal(load_split(spec, TRAIN).hr, a)


def test_batch_iter_order_and_coverage():
    a = [y.tolist() for _, _, y in batch_iter(SMALL, TRAIN, 8, epoch_seed=3)]
    b = [y.tolist() for _, _, y in batch_iter(SMALL, TRAIN, 8, epoch_seed=3)]
    assert a == b
    perm = epoch_order(40, 3)
    assert sorted(perm.tolist()) == list(range(40))
    assert not np.array_equal(perm, epoch_order(40, 4))


def test_batch_iter_partial_batches():
    train = list(batch_iter(SMALL, TRAIN, 16, epoch_seed=1))
    assert [len(y) for _, _, y in train] == [16, 16]
    assert steps_per_epoch(SMALL, 16) == 2
    test = list(batch_iter(SMALL, TEST, 5))
    assert [len(y) for _, _, y in test] == [5, 5, 3]
    data = load_split(SMALL, TEST)
    assert np.array_equal(np.concatenate([hr for _, hr, _ in test]), data.hr)  # every index exactly once


def test_batch_iter_errors_and_labels():
    with pytest.raises(ValueError):
        next(batch_iter(SMALL, TEST, 14))
    with pytest.raises(ValueError):
        next(batch_iter(SMALL, "val", 2))
    _, _, seg = next(batch_iter(SMALL, TEST, 4, task_kind="segmentation"))
    assert seg.shape == (4, 32, 32)
    _, _, gen = next(batch_iter(SMALL, TEST, 4, labels="generic"))
    assert np.array_equal(gen, load_split(SMALL, TEST).generic[:4])


def test_dump_dataset(tmp_path):
    spec = DatasetSpec(train_count=3, test_count=2, image_size=16)
    manifest = dump_dataset(spec, tmp_path)
    lines = open(manifest).read().splitlines()
    assert len(lines) == 5
    idx, label, rel = lines[0].split()
    assert idx == "train:0" and int(label) == 0 and (tmp_path / rel).exists()
