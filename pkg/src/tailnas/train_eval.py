"""From-scratch training of derived genotypes and long-tail-aware evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from tailnas import optim, rebalance, supernet as sn
from tailnas.autodiff import backward, no_grad
from tailnas.autodiff.tensor import Tensor
from tailnas.errors import SearchAborted
from tailnas.search import WOptSpec, balanced_accuracy
from tailnas.util import config_hash


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    opt: WOptSpec = WOptSpec(lr=0.05, momentum=0.9, weight_decay=3e-4)
    loss: rebalance.LossSpec = rebalance.LossSpec(kind="ce")
    mixup: rebalance.MixupSpec = rebalance.MixupSpec(enabled=False)
    crt: Optional[rebalance.CrtSpec] = None
    classifier: str = "trainable"
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def hash(self):
        return config_hash(self)


@dataclass
class EvalReport:
    overall: float
    per_class: list
    many: float
    medium: float
    few: float
    group_classes: dict
    param_count: int
    config_hash: str
    seed: int

    def to_json(self):
        return json.dumps({
            "overall": self.overall,
            "per_class": self.per_class,
            "many": self.many,
            "medium": self.medium,
            "few": self.few,
            "group_classes": self.group_classes,
            "param_count": self.param_count,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }, indent=2) + "\n"


def train_from_scratch(genotype, net_config, config, train_set, test_set):
    """Train a discrete genotype network from a fresh init; returns (net, curve, crt).

    The curve has one row per epoch: train loss and balanced test accuracy.
    Deterministic per seed. A non-finite loss aborts with a diagnostic.
    """
    net = sn.DiscreteNetwork(genotype, net_config, classifier=config.classifier, seed=config.seed)
    params = net.parameters()
    opt = optim.SGD(params, lr=config.opt.lr, momentum=config.opt.momentum,
                    weight_decay=config.opt.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 21]))
    mix_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 22]))
    curve = []
    for epoch in range(1, config.epochs + 1):
        opt.lr = optim.cosine_lr(config.opt.lr, epoch - 1, config.epochs)
        frac = (epoch - 1) / config.epochs
        losses = []
        for xb, yb in train_set.iter_batches(config.batch_size, rng):
            mixed, pair, lam = rebalance.mixup_batch(config.mixup, xb, yb, mix_rng)
            opt.zero_grad()
            logits = net(Tensor(mixed), True)
            loss = rebalance.mixup_loss(config.loss, logits, pair, lam, epoch_fraction=frac)
            backward(loss)
            optim.clip_grad_norm(params, config.grad_clip)
            opt.step()
            if not math.isfinite(loss.item()):
                raise SearchAborted(f"non-finite training loss at epoch {epoch}")
            losses.append(loss.item())
        acc = balanced_accuracy(lambda x: net(x, False), test_set)
        curve.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "balanced_acc": acc})
    crt_result = None
    if config.crt is not None:
        crt_result = rebalance.crt_retrain(config.crt, net, train_set, seed=config.seed)
    return net, curve, crt_result


def count_parameters(network):
    """Trainable scalars; a fixed ETF head contributes zero."""
    return network.param_count()


def group_thresholds(train_counts):
    """(many_min, few_max) cutoffs scaled from the max class size."""
    n_max = int(max(train_counts))
    return (2.0 / 3.0) * n_max, (1.0 / 9.0) * n_max


def evaluate(network, test_set, train_counts, thresholds=None, seed=0, cfg_hash=""):
    """Top-1 and per-class accuracy with many/medium/few-shot groups.

    Groups are assigned from training-set class counts: many above
    2/3*n_max, few below 1/9*n_max, medium between. The test set must be
    balanced and cover every class.
    """
    counts = np.asarray(train_counts)
    if len(counts) != test_set.n_classes:
        raise ValueError(f"{len(counts)} train counts vs {test_set.n_classes} classes")
    if (test_set.per_class_counts == 0).any():
        missing = np.flatnonzero(test_set.per_class_counts == 0).tolist()
        raise ValueError(f"classes {missing} absent from the test set")
    many_min, few_max = thresholds if thresholds is not None else group_thresholds(counts)
    correct = np.zeros(test_set.n_classes)
    total = np.zeros(test_set.n_classes)
    with no_grad():
        for xb, yb in test_set.iter_batches(100):
            preds = network(Tensor(xb), False).data.argmax(axis=1)
            for c in range(test_set.n_classes):
                mask = yb == c
                total[c] += mask.sum()
                correct[c] += (preds[mask] == c).sum()
    per_class = correct / total
    groups = {"many": [], "medium": [], "few": []}
    for c, n in enumerate(counts):
        key = "many" if n > many_min else ("few" if n < few_max else "medium")
        groups[key].append(c)
    gacc = {k: float(np.mean(per_class[v])) if v else math.nan for k, v in groups.items()}
    return EvalReport(
        overall=float(per_class.mean()),
        per_class=[float(v) for v in per_class],
        many=gacc["many"],
        medium=gacc["medium"],
        few=gacc["few"],
        group_classes=groups,
        param_count=network.param_count(),
        config_hash=cfg_hash,
        seed=seed,
    )
