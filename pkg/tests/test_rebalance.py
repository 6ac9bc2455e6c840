"""Losses and re-balancing baselines."""

import numpy as np
import pytest

from tailnas import data, rebalance, supernet as sn
from tailnas.autodiff import Tensor, functional as F, grad_check
from tailnas.rebalance import CrtSpec, DrwSpec, LossSpec, MixupSpec


def test_uniform_logits_ce_is_log_c():
    logits = Tensor(np.zeros((4, 10)))
    labels = np.array([0, 3, 7, 9])
    spec = LossSpec(kind="ce")
    assert abs(rebalance.loss(spec, logits, labels).item() - np.log(10)) < 1e-12


def test_ldam_margin_ratio():
    spec = LossSpec(kind="ldam", class_counts=(16, 1))
    m = rebalance.ldam_margins(spec)
    assert abs(m[1] / m[0] - 2.0) < 1e-12  # 16^(1/4)
    assert abs(m.max() - spec.ldam_max_margin) < 1e-12


def test_drw_before_start_equals_plain_ldam():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 4, size=6)
    plain = LossSpec(kind="ldam", class_counts=(40, 20, 10, 5))
    deferred = LossSpec(kind="ldam", class_counts=(40, 20, 10, 5), drw=DrwSpec(start_fraction=0.8))
    a = rebalance.loss(plain, logits, labels, epoch_fraction=0.5).item()
    b = rebalance.loss(deferred, logits, labels, epoch_fraction=0.5).item()
    assert a == b  # bit-exact: weights not yet active


def test_drw_after_start_reweights():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(8, 3)))
    labels = np.array([0, 0, 0, 0, 1, 1, 2, 2])
    spec = LossSpec(kind="ldam", class_counts=(100, 10, 2), drw=DrwSpec(start_fraction=0.5))
    before = rebalance.loss(spec, logits, labels, epoch_fraction=0.4).item()
    after = rebalance.loss(spec, logits, labels, epoch_fraction=0.6).item()
    assert before != after


def test_ldam_margin_zero_is_scaled_ce():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.normal(size=(5, 6)))
    labels = rng.integers(0, 6, size=5)
    spec = LossSpec(kind="ldam", class_counts=(10,) * 6, ldam_max_margin=0.0)
    via_ldam = rebalance.loss(spec, logits, labels).item()
    via_ce = rebalance.loss(LossSpec(kind="ce"), F.scalar_mul(logits, 30.0), labels).item()
    assert via_ldam == via_ce


def test_loss_gradients_pass_finite_differences():
    # logits small enough that scale-30 margins keep the softmax resolvable
    # by central differences (unit-scale logits saturate to e^-30 gradients)
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 5, size=7)
    for spec in (LossSpec(kind="ce"),
                 LossSpec(kind="ldam", class_counts=(50, 25, 12, 6, 3))):
        err = grad_check(lambda z, s=spec: rebalance.loss(s, z, labels, 0.9),
                         Tensor(0.05 * rng.normal(size=(7, 5))), eps=1e-6)
        assert err < 1e-4


def test_label_out_of_range():
    with pytest.raises(ValueError):
        rebalance.loss(LossSpec(kind="ce"), Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_ldam_requires_counts():
    with pytest.raises(ValueError):
        LossSpec(kind="ldam")
    with pytest.raises(ValueError):
        LossSpec(kind="ldam", class_counts=(5, 0))


def test_mixup_lambda_one_passthrough():
    rng = np.random.default_rng(4)
    images = rng.normal(size=(6, 1, 4, 4))
    labels = np.arange(6)
    mixed, (la, lb), lam = rebalance.mixup_batch(MixupSpec(enabled=False), images, labels, rng)
    assert lam == 1.0 and (mixed == images).all() and (la == lb).all()


def test_mixup_single_sample_passthrough():
    rng = np.random.default_rng(5)
    images = rng.normal(size=(1, 1, 2, 2))
    mixed, _, lam = rebalance.mixup_batch(MixupSpec(), images, np.array([0]), rng)
    assert lam == 1.0 and (mixed == images).all()


def test_mixup_identical_images_fixed_point():
    rng = np.random.default_rng(6)
    img = rng.normal(size=(1, 2, 3))
    images = np.stack([img, img])
    mixed, _, lam = rebalance.mixup_batch(MixupSpec(), images, np.array([0, 1]), rng)
    assert np.allclose(mixed[0], img) and np.allclose(mixed[1], img)


def test_mixup_preserves_mean_linearity():
    rng = np.random.default_rng(7)
    images = rng.normal(size=(32, 3, 4, 4))
    labels = rng.integers(0, 4, size=32)
    mixed, _, lam = rebalance.mixup_batch(MixupSpec(beta_param=0.7), images, labels, rng)
    # permutation reshuffles the same pixels: the batch mean is exactly preserved
    assert abs(mixed.mean() - images.mean()) < 1e-12


def test_mixup_large_beta_concentrates_at_half():
    rng = np.random.default_rng(8)
    lams = [rebalance.mixup_batch(MixupSpec(beta_param=500.0),
                                  np.zeros((2, 1, 1, 1)), np.array([0, 1]), rng)[2]
            for _ in range(50)]
    assert max(abs(l - 0.5) for l in lams) < 0.1


def test_class_balanced_sampler_frequencies():
    spec = data.LongTailSpec(n_classes=5, n_max=64, rho=16, seed=0, image_size=(1, 4, 4))
    train, _ = data.synthesize(spec)
    rng = np.random.default_rng(9)
    counts = np.zeros(5)
    n_draws = 0
    for _, yb in rebalance.class_balanced_batches(train, 100, 100, rng):
        counts += np.bincount(yb, minlength=5)
        n_draws += len(yb)
    freqs = counts / n_draws
    assert np.abs(freqs - 0.2).max() < 0.02 * 1.0  # within 2% absolute of uniform


def _tiny_genotype_net(classifier, seed=0):
    cfg = sn.SupernetConfig(n_cells=2, init_channels=4, n_classes=4, image_channels=1,
                            classifier=classifier)
    net = sn.Supernet(cfg, seed=seed)
    g = sn.derive_genotype(net.init_alpha(seed), cfg, meta={})
    return sn.DiscreteNetwork(g, cfg, classifier=classifier, seed=seed), cfg


def test_crt_freezes_backbone_bit_exactly():
    spec = data.LongTailSpec(n_classes=4, n_max=24, rho=8, seed=1, image_size=(1, 8, 8))
    train, _ = data.synthesize(spec)
    net, _ = _tiny_genotype_net("trainable")
    result = rebalance.crt_retrain(CrtSpec(epochs=2, batch_size=16), net, train, seed=0)
    assert result.applied
    assert result.backbone_hash_before == result.backbone_hash_after


def test_crt_on_etf_head_is_noop():
    spec = data.LongTailSpec(n_classes=4, n_max=12, rho=4, seed=2, image_size=(1, 8, 8))
    train, _ = data.synthesize(spec)
    net, _ = _tiny_genotype_net("etf")
    before = {n: t.data.copy() for n, t in net.named_tensors()}
    result = rebalance.crt_retrain(CrtSpec(epochs=1), net, train, seed=0)
    assert not result.applied and "no-op" in result.notice
    for n, t in net.named_tensors():
        assert (t.data == before[n]).all()


def test_effective_number_weights_monotone():
    w = rebalance.effective_number_weights([100, 10, 1])
    assert w[0] < w[1] < w[2]
