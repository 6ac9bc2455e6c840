"""Benchmark the compiled im2col/col2im kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Times conv2d forward and backward on supernet-representative shapes with
both backends and prints a speedup table. Also cross-checks that the two
backends agree to near machine precision.
"""

import argparse
import time

import numpy as np

from tailnas import kernels
from tailnas.kernels import pykernels

try:
    from tailnas.kernels import _convkernels
except ImportError:
    _convkernels = None

SHAPES = [
    # (label, N, C_in, H, W, C_out, k, stride, padding, dilation, groups)
    ("stem 3x3", 16, 3, 16, 16, 24, 3, 1, 1, 1, 1),
    ("full 3x3", 16, 8, 16, 16, 8, 3, 1, 1, 1, 1),
    ("depthwise 3x3", 16, 8, 16, 16, 8, 3, 1, 1, 1, 8),
    ("depthwise 5x5 dil2", 16, 8, 16, 16, 8, 5, 1, 4, 2, 8),
    ("grouped 3x3 (4 paths)", 16, 8, 16, 16, 8, 3, 1, 1, 1, 4),
    ("strided 3x3", 16, 16, 16, 16, 16, 3, 2, 1, 1, 1),
    ("wide 3x3", 16, 32, 8, 8, 32, 3, 1, 1, 1, 1),
]


def _time(fn, repeats):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e6


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()

    if _convkernels is None:
        print("compiled extension not built; run `pip install -e .` first")
        return 1
    print(f"active backend at import: {kernels.BACKEND}")
    header = f"{'shape':<24s} {'dir':<4s} {'python us':>12s} {'compiled us':>12s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    rng = np.random.default_rng(0)
    for label, n, cin, h, w, cout, k, s, p, d, g in SHAPES:
        x = rng.normal(size=(n, cin, h, w))
        wt = rng.normal(size=(cout, cin // g, k, k))
        y_py = kernels.conv2d_forward(x, wt, s, p, d, g, impl=pykernels)
        y_c = kernels.conv2d_forward(x, wt, s, p, d, g, impl=_convkernels)
        assert np.abs(y_py - y_c).max() < 1e-12, label
        gy = rng.normal(size=y_py.shape)
        gx_py, gw_py = kernels.conv2d_backward(gy, x, wt, s, p, d, g, True, True, impl=pykernels)
        gx_c, gw_c = kernels.conv2d_backward(gy, x, wt, s, p, d, g, True, True, impl=_convkernels)
        assert np.abs(gx_py - gx_c).max() < 1e-12 and np.abs(gw_py - gw_c).max() < 1e-12, label

        t_fwd_py = _time(lambda: kernels.conv2d_forward(x, wt, s, p, d, g, impl=pykernels), args.repeats)
        t_fwd_c = _time(lambda: kernels.conv2d_forward(x, wt, s, p, d, g, impl=_convkernels), args.repeats)
        t_bwd_py = _time(lambda: kernels.conv2d_backward(gy, x, wt, s, p, d, g, True, True,
                                                         impl=pykernels), args.repeats)
        t_bwd_c = _time(lambda: kernels.conv2d_backward(gy, x, wt, s, p, d, g, True, True,
                                                        impl=_convkernels), args.repeats)
        print(f"{label:<24s} {'fwd':<4s} {t_fwd_py:12.1f} {t_fwd_c:12.1f} {t_fwd_py / t_fwd_c:7.2f}x")
        print(f"{label:<24s} {'bwd':<4s} {t_bwd_py:12.1f} {t_bwd_c:12.1f} {t_bwd_py / t_bwd_c:7.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
