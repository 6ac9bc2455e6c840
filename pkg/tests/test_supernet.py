"""Mixed operations, supernet forward, discretization, instantiation."""

import json

import numpy as np
import pytest

from tailnas import supernet as sn
from tailnas.autodiff import Tensor, backward, functional as F, grad_check, no_grad
from tailnas.catalog import CATALOG_ORDER, build_op
from tailnas.errors import ShapeError

SMALL = sn.SupernetConfig(n_cells=2, init_channels=4, n_nodes=2, multiplier=2,
                          n_classes=10, image_channels=3, reductions=(1,))


def _edge_ops(c=4, stride=1, seed=0):
    return [build_op(k, c, c, stride, seed=seed + i) for i, k in enumerate(CATALOG_ORDER)]


def test_mixed_op_uniform_alpha_is_mean():
    ops = _edge_ops()
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 8, 8)))
    alpha = Tensor(np.zeros(len(ops)))
    with no_grad():
        mixed = sn.mixed_op(x, ops, alpha, train=False)
        mean = sum(op(x, False).data for op in ops) / len(ops)
    assert np.abs(mixed.data - mean).max() < 1e-12


def test_mixed_op_saturated_alpha_selects_one():
    ops = _edge_ops()
    x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 8, 8)))
    logits = np.full(len(ops), -40.0)
    logits[4] = 40.0  # sep_conv_3x3
    with no_grad():
        mixed = sn.mixed_op(x, ops, Tensor(logits), train=False)
        only = ops[4](x, False)
    assert np.abs(mixed.data - only.data).max() < 1e-12


def test_mixed_op_length_mismatch():
    ops = _edge_ops()
    with pytest.raises(ShapeError):
        sn.mixed_op(Tensor(np.zeros((1, 4, 8, 8))), ops, Tensor(np.zeros(3)))


def test_mixed_op_alpha_gradient_finite_differences():
    ops = _edge_ops(c=2)
    x = Tensor(np.random.default_rng(2).normal(size=(1, 2, 6, 6)))
    proj = Tensor(np.random.default_rng(3).normal(size=(1, 2, 6, 6)))
    a0 = Tensor(np.random.default_rng(4).normal(size=(len(ops),)))
    err = grad_check(lambda a: F.sum_(F.mul(sn.mixed_op(x, ops, a, True), proj)), a0, eps=1e-5)
    assert err < 1e-4


def test_supernet_logit_shape_and_batch_checks():
    net = sn.Supernet(SMALL, seed=0)
    alpha = net.init_alpha(0)
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3, 16, 16)))
    assert net(x, alpha, True).shape == (4, 10)
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((2, 3, 15, 16))), alpha, True)


def test_etf_supernet_classifier_never_gets_gradient():
    cfg = sn.SupernetConfig(**{**SMALL.__dict__, "classifier": "etf"})
    net = sn.Supernet(cfg, seed=0)
    alpha = net.init_alpha(0)
    w_before = net.classifier.weight.data.copy()
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 16, 16)))
    loss = F.cross_entropy(net(x, alpha, True), np.array([0, 1]))
    backward(loss)
    assert net.classifier.weight.grad is None
    assert (net.classifier.weight.data == w_before).all()
    assert all(net.classifier.weight is not p for p in net.parameters())


def test_eval_mode_is_per_sample():
    net = sn.Supernet(SMALL, seed=3)
    alpha = net.init_alpha(3)
    x = np.random.default_rng(2).normal(size=(5, 3, 16, 16))
    with no_grad():
        net(Tensor(x), alpha, True)  # populate running stats
        out = net(Tensor(x), alpha, False).data
        perm = np.array([3, 0, 4, 1, 2])
        out_perm = net(Tensor(x[perm]), alpha, False).data
    assert np.abs(out[perm] - out_perm).max() < 1e-10


def test_mixing_weights_sum_to_one():
    net = sn.Supernet(SMALL, seed=1)
    alpha = net.init_alpha(1)
    normal_w, reduce_w = alpha.mixing_weights()
    for w in normal_w + reduce_w:
        assert abs(w.sum() - 1.0) < 1e-12 and (w >= 0).all()


def test_derive_genotype_respects_argmax():
    cfg = SMALL
    spec = cfg.cell_spec()
    alpha = sn.ArchParams.initialize(spec.n_edges, len(cfg.catalog), seed=0)
    # edge (0 -> 2) is index 0; make sep_conv_3x3 dominant there
    alpha.alpha_normal[0].data[:] = -5.0
    alpha.alpha_normal[0].data[4] = 5.0
    g = sn.derive_genotype(alpha, cfg)
    assert [2, 0, "sep_conv_3x3"] in g["normal"]


def test_derive_genotype_never_zero_and_tie_break():
    cfg = SMALL
    spec = cfg.cell_spec()
    alpha = sn.ArchParams.initialize(spec.n_edges, len(cfg.catalog), seed=0)
    for t in alpha.tensors():
        t.data[:] = 0.0  # full tie: lowest edge and catalog indices win
    g = sn.derive_genotype(alpha, cfg)
    ops = [op for _, _, op in g["normal"] + g["reduce"]]
    assert "zero" not in ops
    # ties resolve to the first non-zero catalog entry on the two lowest edges
    assert g["normal"][:2] == [[2, 0, "skip_connect"], [2, 1, "skip_connect"]]
    g2 = sn.derive_genotype(alpha, cfg)
    assert g == g2


def test_derive_genotype_zero_dominant_falls_back():
    cfg = SMALL
    spec = cfg.cell_spec()
    alpha = sn.ArchParams.initialize(spec.n_edges, len(cfg.catalog), seed=0)
    for t in alpha.tensors():
        t.data[:] = 0.0
        t.data[0] = 9.0  # zero op dominant everywhere
        t.data[5] = 1.0  # best non-zero: sep_conv_5x5
    g = sn.derive_genotype(alpha, cfg)
    ops = {op for _, _, op in g["normal"] + g["reduce"]}
    assert ops == {"sep_conv_5x5"}


def test_derive_invariant_to_per_edge_shift():
    cfg = SMALL
    spec = cfg.cell_spec()
    alpha = sn.ArchParams.initialize(spec.n_edges, len(cfg.catalog), seed=5)
    g1 = sn.derive_genotype(alpha, cfg)
    for t in alpha.tensors():
        t.data += 3.7  # softmax shift invariance
    g2 = sn.derive_genotype(alpha, cfg)
    assert g1 == g2


def test_genotype_json_roundtrip_and_stable_bytes():
    cfg = SMALL
    alpha = sn.ArchParams.initialize(cfg.cell_spec().n_edges, len(cfg.catalog), seed=2)
    g = sn.derive_genotype(alpha, cfg, meta={"seed": 2, "epoch": 5, "config_hash": "abc"})
    text = sn.genotype_to_json(g)
    assert sn.genotype_from_json(text) == g
    assert sn.genotype_to_json(sn.genotype_from_json(text)) == text
    parsed = json.loads(text)
    assert list(parsed) == ["normal", "reduce", "meta"]


def test_instantiate_param_count_below_supernet():
    net = sn.Supernet(SMALL, seed=0)
    g = sn.derive_genotype(net.init_alpha(0), SMALL)
    dn = sn.DiscreteNetwork(g, SMALL, seed=0)
    assert dn.param_count() < net.param_count()


def test_instantiate_node_count_mismatch_errors():
    net = sn.Supernet(SMALL, seed=0)
    g = sn.derive_genotype(net.init_alpha(0), SMALL)
    bigger = sn.SupernetConfig(**{**SMALL.__dict__, "n_nodes": 3})
    with pytest.raises(ShapeError):
        sn.DiscreteNetwork(g, bigger, seed=0)


def test_saturated_alpha_instantiation_matches_supernet():
    cfg = SMALL
    net = sn.Supernet(cfg, seed=4)
    spec = cfg.cell_spec()
    alpha = net.init_alpha(4)
    g = sn.derive_genotype(alpha, cfg)
    retained = {("normal", dst, src): op for dst, src, op in g["normal"]}
    retained.update({("reduce", dst, src): op for dst, src, op in g["reduce"]})
    name_idx = {k: i for i, k in enumerate(cfg.catalog)}
    for cell_type, tensors in (("normal", alpha.alpha_normal), ("reduce", alpha.alpha_reduce)):
        for e, (src, dst) in enumerate(spec.edges()):
            t = tensors[e]
            t.data[:] = -60.0
            key = (cell_type, dst, src)
            t.data[name_idx[retained[key]] if key in retained else name_idx["zero"]] = 60.0
    dn = sn.instantiate_genotype(g, cfg, seed=9, inherit_from=net)
    x = Tensor(np.random.default_rng(5).normal(size=(3, 3, 16, 16)))
    got = dn(x, True).data
    want = net(x, alpha, True).data
    assert np.abs(got - want).max() < 1e-10


def test_supernet_deterministic_per_seed():
    a = sn.Supernet(SMALL, seed=7)
    b = sn.Supernet(SMALL, seed=7)
    for (_, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert (ta.data == tb.data).all()
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 16, 16)))
    alpha_a, alpha_b = a.init_alpha(7), b.init_alpha(7)
    assert (a(x, alpha_a, True).data == b(x, alpha_b, True).data).all()


def test_skip_fraction():
    g = {"normal": [[2, 0, "skip_connect"], [2, 1, "sep_conv_3x3"]],
         "reduce": [[2, 0, "max_pool_3x3"], [2, 1, "skip_connect"]], "meta": {}}
    assert sn.skip_fraction(g) == 0.5
