"""Both kernel backends against a brute-force convolution oracle."""

import numpy as np
import pytest

from tailnas import kernels
from tailnas.kernels import pykernels

try:
    from tailnas.kernels import _convkernels
except ImportError:
    _convkernels = None

IMPLS = [pykernels] + ([_convkernels] if _convkernels else [])


def direct_conv(x, w, stride, padding, dilation, groups):
    """Naive nested-loop convolution, the independent oracle."""
    n, cin, h, wid = x.shape
    cout, cg, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wid + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    y = np.zeros((n, cout, ho, wo))
    for nn in range(n):
        for co in range(cout):
            g = co // (cout // groups)
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for cl in range(cg):
                        ci = g * cg + cl
                        for a in range(kh):
                            for b in range(kw):
                                acc += xp[nn, ci, i * stride + a * dilation,
                                          j * stride + b * dilation] * w[co, cl, a, b]
                    y[nn, co, i, j] = acc
    return y


CASES = [
    (2, 4, 8, 8, 6, 3, 1, 1, 1, 1),
    (2, 4, 8, 8, 6, 3, 2, 1, 1, 2),
    (1, 8, 9, 9, 8, 3, 1, 1, 1, 8),
    (2, 4, 9, 7, 4, 5, 1, 4, 2, 4),
    (2, 4, 8, 8, 4, 5, 2, 2, 1, 1),
    (3, 2, 5, 5, 4, 1, 1, 0, 1, 1),
    (3, 4, 6, 6, 4, 1, 2, 0, 1, 2),
]


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
@pytest.mark.parametrize("case", CASES)
def test_forward_matches_direct_conv(impl, case):
    n, cin, h, w, cout, k, s, p, d, g = case
    rng = np.random.default_rng(hash(case) % 2**32)
    x = rng.normal(size=(n, cin, h, w))
    wt = rng.normal(size=(cout, cin // g, k, k))
    got = kernels.conv2d_forward(x, wt, s, p, d, g, impl=impl)
    want = direct_conv(x, wt, s, p, d, g)
    assert got.shape == want.shape
    assert np.abs(got - want).max() < 1e-12


@pytest.mark.skipif(_convkernels is None, reason="extension not built")
@pytest.mark.parametrize("case", CASES)
def test_backends_agree_bitwise(case):
    n, cin, h, w, cout, k, s, p, d, g = case
    rng = np.random.default_rng(1 + hash(case) % 2**32)
    x = rng.normal(size=(n, cin, h, w))
    wt = rng.normal(size=(cout, cin // g, k, k))
    y = kernels.conv2d_forward(x, wt, s, p, d, g, impl=_convkernels)
    y2 = kernels.conv2d_forward(x, wt, s, p, d, g, impl=pykernels)
    assert (y == y2).all()
    gy = rng.normal(size=y.shape)
    gx1, gw1 = kernels.conv2d_backward(gy, x, wt, s, p, d, g, True, True, impl=_convkernels)
    gx2, gw2 = kernels.conv2d_backward(gy, x, wt, s, p, d, g, True, True, impl=pykernels)
    assert (gx1 == gx2).all() and (gw1 == gw2).all()


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_backward_matches_finite_differences(impl):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(4, 1, 3, 3))
    gy = rng.normal(size=(1, 4, 5, 5))
    gx, gw = kernels.conv2d_backward(gy, x, w, 1, 1, 1, 2, True, True, impl=impl)
    eps = 1e-6
    for arr, grad in ((x, gx), (w, gw)):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(0, flat.size, 7):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float((kernels.conv2d_forward(x, w, 1, 1, 1, 2, impl=impl) * gy).sum())
            flat[i] = orig - eps
            fm = float((kernels.conv2d_forward(x, w, 1, 1, 1, 2, impl=impl) * gy).sum())
            flat[i] = orig
            assert abs((fp - fm) / (2 * eps) - gflat[i]) < 1e-6


def test_selected_backend_reported():
    assert kernels.BACKEND in ("compiled", "python")
