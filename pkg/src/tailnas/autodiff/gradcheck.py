"""Finite-difference gradient checking against the taped backward pass."""

from __future__ import annotations

import numpy as np

from tailnas.autodiff import tensor as T
from tailnas.autodiff.tensor import Tensor
from tailnas.errors import ShapeError


def grad_check(fn, point, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    fn maps a Tensor to a scalar Tensor. The relative error per coordinate
    is |analytic - numeric| / (|analytic| + |numeric| + 1e-12). A
    non-deterministic fn (two evaluations at the same point disagree)
    is reported as a failed check by returning inf.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    T.active_tape().clear()
    x = Tensor(np.array(point.data, copy=True), requires_grad=True)

    out = fn(x)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued fn, got output shape {out.shape}")
    if out.requires_grad and len(T.active_tape()):
        T.backward(out)
    # an untouched grad means the output does not depend on x: gradient zero
    analytic = np.zeros_like(x.data) if x.grad is None else np.array(x.grad, copy=True)
    T.active_tape().clear()

    with T.no_grad():
        if float(fn(x).data) != float(out.data):
            return float("inf")

        flat = x.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(x).data)
            flat[i] = orig - eps
            f_minus = float(fn(x).data)
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
