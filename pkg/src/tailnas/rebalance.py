"""Losses and re-balancing baselines: CE, LDAM(+DRW), mixup, classifier retraining.

Constants follow the margin-loss method's original recipe (logit scale 30,
max margin 0.5, deferred re-weighting from 80% of the run with
effective-number beta 0.9999).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from tailnas.autodiff import functional as F
from tailnas.autodiff import no_grad
from tailnas.autodiff.tensor import Tensor

EFFECTIVE_NUMBER_BETA = 0.9999


@dataclass(frozen=True)
class DrwSpec:
    start_fraction: float = 0.8

    def __post_init__(self):
        if not 0 < self.start_fraction < 1:
            raise ValueError(f"start_fraction must be in (0,1), got {self.start_fraction}")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"  # ce | ldam
    class_counts: Optional[tuple] = None
    drw: Optional[DrwSpec] = None
    ldam_scale: float = 30.0
    ldam_max_margin: float = 0.5

    def __post_init__(self):
        if self.kind not in ("ce", "ldam"):
            raise ValueError(f"loss kind must be ce or ldam, got {self.kind!r}")
        if self.kind == "ldam" and self.class_counts is None:
            raise ValueError("ldam needs class_counts")
        if self.class_counts is not None and min(self.class_counts) <= 0:
            raise ValueError("class counts must be positive")


def ldam_margins(spec):
    """Per-class margin ~ n^(-1/4), scaled so the largest equals ldam_max_margin."""
    n = np.asarray(spec.class_counts, dtype=np.float64)
    m = n ** -0.25
    return m * (spec.ldam_max_margin / m.max())


def effective_number_weights(counts, beta=EFFECTIVE_NUMBER_BETA):
    counts = np.asarray(counts, dtype=np.float64)
    eff = 1.0 - np.power(beta, counts)
    w = (1.0 - beta) / eff
    return w / w.sum() * len(counts)


def drw_weights(spec, epoch_fraction):
    """Class weights for deferred re-weighting; None before the start fraction."""
    if spec.drw is None or epoch_fraction < spec.drw.start_fraction:
        return None
    return effective_number_weights(spec.class_counts)


def loss(spec, logits, labels, epoch_fraction=0.0):
    """Training loss per spec; epoch_fraction in [0,1] drives the DRW switch."""
    weights = drw_weights(spec, epoch_fraction)
    if spec.kind == "ce":
        return F.cross_entropy(logits, labels, class_weights=weights)
    margins = ldam_margins(spec)
    n = logits.shape[0]
    shift = np.zeros(logits.shape)
    shift[np.arange(n), labels] = -margins[np.asarray(labels)]
    shifted = F.add(logits, Tensor(shift))
    return F.cross_entropy(F.scalar_mul(shifted, spec.ldam_scale), labels, class_weights=weights)


@dataclass(frozen=True)
class MixupSpec:
    beta_param: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if self.beta_param <= 0:
            raise ValueError(f"beta_param must be positive, got {self.beta_param}")


def mixup_batch(spec, images, labels, rng):
    """Convex-combine the batch with a shuffled copy of itself.

    Returns (mixed images, (labels_a, labels_b), lam). Disabled or
    single-sample batches pass through with lam = 1.
    """
    if not spec.enabled or len(labels) < 2:
        return images, (labels, labels), 1.0
    lam = float(rng.beta(spec.beta_param, spec.beta_param))
    perm = rng.permutation(len(labels))
    mixed = lam * images + (1.0 - lam) * images[perm]
    return mixed, (labels, labels[perm]), lam


def mixup_loss(spec, logits, label_pair, lam, epoch_fraction=0.0):
    """lam-weighted sum of the base loss against both label sets."""
    la, lb = label_pair
    if lam == 1.0:
        return loss(spec, logits, la, epoch_fraction)
    part_a = F.scalar_mul(loss(spec, logits, la, epoch_fraction), lam)
    part_b = F.scalar_mul(loss(spec, logits, lb, epoch_fraction), 1.0 - lam)
    return F.add(part_a, part_b)


@dataclass(frozen=True)
class CrtSpec:
    epochs: int = 5
    reinit_classifier: bool = True
    batch_size: int = 64
    lr: float = 0.05

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"cRT epochs must be >= 1, got {self.epochs}")


@dataclass
class CrtResult:
    applied: bool
    notice: str
    epochs_run: int = 0
    backbone_hash_before: str = ""
    backbone_hash_after: str = ""


def class_balanced_batches(dataset, batch_size, steps, rng):
    """Yield batches whose labels are drawn uniformly over classes."""
    per_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.n_classes)]
    present = [c for c, idx in enumerate(per_class) if len(idx)]
    for _ in range(steps):
        cls = rng.choice(present, size=batch_size)
        idx = np.array([per_class[c][rng.integers(len(per_class[c]))] for c in cls])
        yield dataset.images[idx], dataset.labels[idx]


def _hash_arrays(named):
    h = hashlib.sha256()
    for name, arr in sorted(named):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def crt_retrain(spec, network, train_set, seed=0):
    """Freeze the backbone, retrain the classifier with class-balanced sampling.

    The backbone runs in eval mode so its weights and running statistics
    are bit-identical before and after. A fixed (ETF) classifier cannot be
    retrained: explicit no-op with a recorded notice.
    """
    from tailnas import optim
    from tailnas.autodiff import backward

    if network.classifier_kind == "etf":
        return CrtResult(applied=False, notice="classifier is a fixed ETF; cRT is a no-op")

    before = _hash_arrays(network.backbone_state())
    rng = np.random.default_rng(seed)
    if spec.reinit_classifier:
        network.reinit_classifier(rng)
    head = network.classifier_parameters()
    opt = optim.SGD(head, lr=spec.lr, momentum=0.9, weight_decay=0.0)
    steps_per_epoch = max(1, int(np.ceil(len(train_set) / spec.batch_size)))
    for epoch in range(spec.epochs):
        opt.lr = optim.cosine_lr(spec.lr, epoch, spec.epochs)
        for xb, yb in class_balanced_batches(train_set, spec.batch_size, steps_per_epoch, rng):
            with no_grad():
                feats = network.features(Tensor(xb), train=False)
            feats = feats.detach()
            opt.zero_grad()
            ce = F.cross_entropy(network.head_logits(feats, train=False), yb)
            backward(ce)
            opt.step()
    after = _hash_arrays(network.backbone_state())
    return CrtResult(
        applied=True,
        notice="classifier retrained with class-balanced sampling",
        epochs_run=spec.epochs,
        backbone_hash_before=before,
        backbone_hash_after=after,
    )
