"""Finite-difference verification of every primitive and catalog operation.

Inputs are seeded, fixed per check, and kept away from ReLU/max kinks so
the central difference is valid. Losses are random projections of the
outputs where a plain sum would be blind (anything ending in a
normalization layer has constant per-channel sums).
"""

from __future__ import annotations

import numpy as np

from tailnas import catalog
from tailnas.autodiff import functional as F, grad_check
from tailnas.autodiff.tensor import Tensor


def _away_from_kinks(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


def primitive_checks(seed):
    """(name, fn, point) triples covering every differentiable primitive."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
    pt = lambda shape: Tensor(_away_from_kinks(rng, shape))
    fixed = lambda shape: Tensor(rng.normal(size=shape))
    w33 = Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
    w33g = Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)  # groups=2 over 4 channels
    wpw = Tensor(rng.normal(size=(5, 4, 1, 1)), requires_grad=True)
    b = fixed((3, 4))
    m53 = fixed((5, 3))
    x255 = fixed((1, 2, 5, 5))
    x455 = fixed((1, 4, 5, 5))
    x244 = fixed((2, 4, 4, 4))
    x243 = fixed((2, 4, 3, 3))
    proj_split = fixed((2, 4, 3, 3))
    proj_gap = fixed((2, 3))
    gamma = Tensor(rng.normal(size=(4,)) * 0.2 + 1.0, requires_grad=True)
    beta = Tensor(rng.normal(size=(4,)) * 0.1, requires_grad=True)
    labels = rng.integers(0, 4, size=6)
    mixw = Tensor(rng.normal(size=(3,)), requires_grad=True)
    mix_inputs = [fixed((2, 5)) for _ in range(3)]
    scalar = Tensor(np.array(1.3), requires_grad=True)
    bn_input = fixed((2, 4, 4, 4))
    proj4 = fixed((2, 4, 4, 4))

    return [
        ("add", lambda x: F.sum_(F.add(x, b)), pt((3, 4))),
        ("broadcast_add", lambda x: F.sum_(F.mul(F.broadcast_add(b, x), b)), pt((4,))),
        ("elementwise_multiply", lambda x: F.sum_(F.mul(x, b)), pt((3, 4))),
        ("scalar_multiply_const", lambda x: F.sum_(F.scalar_mul(x, -2.5)), pt((3, 4))),
        ("scalar_multiply_tensor", lambda s: F.sum_(F.scalar_mul(b, s)), scalar),
        ("matmul_left", lambda x: F.sum_(F.matmul(x, b)), pt((5, 3))),
        ("matmul_right", lambda x: F.sum_(F.matmul(m53, x)), pt((3, 4))),
        ("relu", lambda x: F.sum_(F.relu(x)), pt((3, 6))),
        ("sigmoid", lambda x: F.sum_(F.sigmoid(x)), pt((3, 6))),
        ("gelu", lambda x: F.sum_(F.gelu(x)), pt((3, 6))),
        ("softmax", lambda x: F.sum_(F.mul(F.softmax(x, axis=1), b)), pt((3, 4))),
        ("log_softmax", lambda x: F.sum_(F.mul(F.log_softmax(x, axis=1), b)), pt((3, 4))),
        ("sum", lambda x: F.sum_(x), pt((4, 3))),
        ("mean", lambda x: F.mean_(x), pt((4, 3))),
        ("concat_split", lambda x: F.sum_(F.mul(F.concat(list(F.split(x, [2, 2], axis=1)), axis=1),
                                                proj_split)), pt((2, 4, 3, 3))),
        ("weighted_sum", lambda w: F.sum_(F.weighted_sum(mix_inputs, F.softmax(w, axis=0))), mixw),
        ("conv2d_input", lambda x: F.sum_(F.conv2d(x, w33, 1, 1, 1, 1)), pt((1, 2, 5, 5))),
        ("conv2d_weight", lambda w: F.sum_(F.conv2d(x255, w, 1, 1, 1, 1)), w33),
        ("conv2d_grouped", lambda w: F.sum_(F.conv2d(x455, w, 2, 1, 1, 2)), w33g),
        ("conv2d_dilated", lambda x: F.sum_(F.conv2d(x, w33, 1, 2, 2, 1)), pt((1, 2, 7, 7))),
        ("conv2d_pointwise", lambda w: F.sum_(F.conv2d(x244, w, 1, 0, 1, 1)), wpw),
        ("batchnorm_train_input", lambda x: F.sum_(F.relu(F.batchnorm(x, gamma, beta))), pt((2, 4, 4, 4))),
        ("batchnorm_affine", lambda g: F.sum_(F.mul(F.batchnorm(bn_input, g, beta), proj4)), gamma),
        ("batchnorm_eval", lambda x: F.sum_(F.batchnorm(x, gamma, beta, np.zeros(4), np.ones(4),
                                                        training=False)), pt((2, 4, 4, 4))),
        ("groupnorm", lambda x: F.sum_(F.mul(F.groupnorm(x, gamma, beta, groups=2), proj4)),
         pt((2, 4, 4, 4))),
        ("channel_scale", lambda s: F.sum_(F.channel_scale(x243, s)), pt((2, 4))),
        ("max_pool", lambda x: F.sum_(F.max_pool2d(x, 3, 2, 1)), pt((2, 3, 7, 7))),
        ("avg_pool", lambda x: F.sum_(F.avg_pool2d(x, 3, 1, 1)), pt((2, 3, 6, 6))),
        ("global_avg_pool", lambda x: F.sum_(F.mul(F.global_avg_pool(x), proj_gap)), pt((2, 3, 4, 4))),
        ("cross_entropy", lambda z: F.cross_entropy(z, labels), pt((6, 4))),
        ("cross_entropy_weighted", lambda z: F.cross_entropy(z, labels, class_weights=[1.0, 2.0, 0.5, 1.5]),
         pt((6, 4))),
    ]


def _swap_in(op, name, replacement):
    """Replace the named tensor attribute inside a module tree."""
    *path, attr = name.split(".")
    target = op
    for seg in path:
        target = target._children[seg]
    setattr(target, attr, replacement)


def op_checks(seed):
    """Gradient of every catalog op w.r.t. its input and one weight tensor."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x09]))
    checks = []
    for kind in catalog.CATALOG_ORDER:
        op = catalog.build_op(kind, 4, 4, 1, seed=seed + 17)
        proj = Tensor(rng.normal(size=(1, 4, 6, 6)))
        x = Tensor(_away_from_kinks(rng, (1, 4, 6, 6)))
        checks.append((
            f"op:{kind}:input",
            lambda v, op=op, pr=proj: F.sum_(F.mul(op(v, True), pr)),
            x,
        ))
        named = [(n, t) for n, t in op.named_tensors() if t.requires_grad]
        if named:
            wname, wtensor = named[0]
            xfix = Tensor(rng.normal(size=(1, 4, 6, 6)))

            def weight_fn(v, op=op, name=wname, xf=xfix, pr=proj):
                _swap_in(op, name, v)
                return F.sum_(F.mul(op(xf, True), pr))

            checks.append((f"op:{kind}:weight", weight_fn, wtensor))
    return checks


def run_gradcheck_suite(seeds=(0, 1, 2), tol=1e-4, eps=1e-5):
    results = []
    for seed in seeds:
        for name, fn, point in primitive_checks(seed) + op_checks(seed):
            err = grad_check(fn, point, eps=eps)
            results.append({
                "name": name,
                "seed": seed,
                "max_rel_error": err,
                "passed": bool(err < tol),
            })
    by_name = {}
    for r in results:
        prev = by_name.get(r["name"])
        if prev is None or r["max_rel_error"] > prev["max_rel_error"]:
            by_name[r["name"]] = r
    summary = sorted(by_name.values(), key=lambda r: r["name"])
    return {
        "tol": tol,
        "eps": eps,
        "seeds": list(seeds),
        "all_passed": all(r["passed"] for r in results),
        "checks": summary,
        "n_checks": len(results),
    }
