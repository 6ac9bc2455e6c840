"""Long-tail synthesis: count profiles, determinism, splits, file formats."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailnas import data
from tailnas.errors import SplitWarning


def test_counts_c10_rho100():
    spec = data.LongTailSpec(n_classes=10, n_max=500, rho=100)
    counts = data.class_counts(spec)
    assert counts[0] == 500 and counts[9] == 5
    assert (np.diff(counts) <= 0).all()


def test_counts_balanced_limit():
    spec = data.LongTailSpec(n_classes=10, n_max=50, rho=1)
    assert (data.class_counts(spec) == 50).all()


def test_counts_two_classes():
    spec = data.LongTailSpec(n_classes=2, n_max=100, rho=50)
    assert data.class_counts(spec).tolist() == [100, 2]


@given(st.integers(2, 30), st.integers(1, 300), st.floats(1.0, 300.0))
@settings(max_examples=40, deadline=None)
def test_counts_profile_properties(c, n_max, rho):
    counts = data.class_counts(data.LongTailSpec(n_classes=c, n_max=n_max, rho=rho))
    assert len(counts) == c
    assert (counts >= 1).all()
    assert (np.diff(counts) <= 0).all()
    n_min = max(1.0, round(n_max * rho**-1.0))
    assert abs(counts[0] / counts[-1] - rho) <= rho / n_min + 1.0


def test_synthesize_counts_and_balance():
    spec = data.LongTailSpec(n_classes=6, n_max=40, rho=20, seed=3, test_per_class=7)
    train, test = data.synthesize(spec)
    assert train.per_class_counts.tolist() == data.class_counts(spec).tolist()
    assert (test.per_class_counts == 7).all()


def test_synthesize_bit_deterministic():
    spec = data.LongTailSpec(n_classes=5, n_max=20, rho=10, seed=8)
    a, _ = data.synthesize(spec)
    b, _ = data.synthesize(spec)
    assert (a.images == b.images).all() and (a.labels == b.labels).all()


def test_conv_probe_separates_above_chance():
    from tailnas import layers, optim
    from tailnas.autodiff import Tensor, backward, functional as F, no_grad

    spec = data.LongTailSpec(n_classes=10, n_max=60, rho=1, seed=0, noise=1.0, image_size=(3, 12, 12))
    train, test = data.synthesize(spec)
    rng = np.random.default_rng(0)
    conv = layers.Conv2d(3, 12, 3, 1, 1, rng=rng)
    lin = layers.Linear(12, 10, rng=rng)
    opt = optim.Adam(conv.parameters() + lin.parameters(), lr=0.01, betas=(0.9, 0.999))
    brng = np.random.default_rng(1)
    for _ in range(6):
        for xb, yb in train.iter_batches(64, brng):
            opt.zero_grad()
            h = F.global_avg_pool(F.relu(conv(Tensor(xb), True)))
            backward(F.cross_entropy(lin(h, True), yb))
            opt.step()
    with no_grad():
        h = F.global_avg_pool(F.relu(conv(Tensor(test.images), False)))
        preds = lin(h, False).data.argmax(1)
    acc = np.mean([(preds[test.labels == c] == c).mean() for c in range(10)])
    assert acc > 0.2  # chance is 0.1


def test_split_halves_profile():
    spec = data.LongTailSpec(n_classes=2, n_max=100, rho=10, seed=0)
    train, _ = data.synthesize(spec)
    w, a = data.bilevel_split(train, 0.5, seed=1)
    assert w.per_class_counts.tolist() == [50, 5]
    assert a.per_class_counts.tolist() == [50, 5]


def test_split_disjoint_and_complete():
    spec = data.LongTailSpec(n_classes=4, n_max=30, rho=6, seed=2)
    train, _ = data.synthesize(spec)
    w, a = data.bilevel_split(train, 0.5, seed=0)
    assert len(w) + len(a) == len(train)
    pool = np.concatenate([w.images.reshape(len(w), -1), a.images.reshape(len(a), -1)])
    orig = train.images.reshape(len(train), -1)
    assert np.unique(pool, axis=0).shape[0] == np.unique(orig, axis=0).shape[0]


def test_split_single_sample_class_warns():
    images = np.zeros((4, 1, 4, 4))
    labels = np.array([0, 0, 0, 1])
    ds = data.LabeledDataset(images, labels, 2)
    with pytest.warns(SplitWarning):
        w, a = data.bilevel_split(ds, 0.5, seed=0)
    assert w.per_class_counts.tolist() == [2, 1]
    assert a.per_class_counts.tolist() == [1, 0]


def test_binary_roundtrip_bit_exact(tmp_path):
    spec = data.LongTailSpec(n_classes=3, n_max=9, rho=3, seed=1, image_size=(2, 5, 5))
    train, _ = data.synthesize(spec)
    path = tmp_path / "ds.bin"
    train.save(path)
    back = data.LabeledDataset.load(path)
    assert (back.images == train.images).all()
    assert (back.labels == train.labels).all()
    assert back.n_classes == train.n_classes


def test_binary_magic_check(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError):
        data.LabeledDataset.load(path)


def test_record_loader_and_subsample(tmp_path):
    rng = np.random.default_rng(0)
    n, shape = 30, (3, 4, 4)
    labels = rng.integers(0, 3, size=n).astype(np.uint8)
    pixels = rng.integers(0, 256, size=(n, np.prod(shape))).astype(np.uint8)
    records = np.concatenate([labels[:, None], pixels], axis=1)
    path = tmp_path / "records.bin"
    records.tofile(path)
    ds = data.load_records(path, shape, n_classes=3)
    assert len(ds) == n and ds.images.max() <= 1.0
    counts = np.minimum(ds.per_class_counts, [5, 3, 2])
    sub = data.subsample_to_profile(ds, counts, seed=0)
    assert sub.per_class_counts.tolist() == counts.tolist()


def test_iter_batches_covers_everything():
    spec = data.LongTailSpec(n_classes=3, n_max=10, rho=2, seed=0)
    train, _ = data.synthesize(spec)
    seen = 0
    for xb, yb in train.iter_batches(4, np.random.default_rng(0)):
        assert len(xb) == len(yb) <= 4
        seen += len(yb)
    assert seen == len(train)
