"""Dense float64 tensors and the computation tape for reverse-mode autodiff.

The tape is define-by-run: primitives append a node per application while
grad recording is enabled, and `backward` sweeps the nodes once in reverse
order, then clears the tape. Tensors are immutable after an operation
completes; gradient accumulation is single-writer per tape.
"""

from __future__ import annotations

import contextlib

import numpy as np

from tailnas.errors import ShapeError


class Tensor:
    """Real array with shape, optionally carrying a gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        """Same data, outside the autodiff graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("output", "backward_fn")

    def __init__(self, output, backward_fn):
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications; record order is topological."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


_tape = Tape()
_grad_enabled = True


def active_tape():
    return _tape


def record(output, backward_fn):
    """Register a backward rule for `output` on the active tape."""
    if _grad_enabled and output.requires_grad:
        _tape.nodes.append(_Node(output, backward_fn))


def recording():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def accumulate(tensor, g):
    """Add `g` into tensor.grad; copies on first write so rules may share arrays."""
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(g, dtype=np.float64)
    else:
        tensor.grad += g


def backward(loss):
    """Run one reverse sweep from a scalar loss and clear the tape.

    Populates .grad on every requires_grad tensor the loss depends on.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not _tape.nodes:
        raise RuntimeError("backward on an empty tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        node.backward_fn(g)
        # an intermediate's grad is spent once its rule ran; free it so the
        # peak stays near one forward's worth of activations
        node.output.grad = None
    _tape.clear()
