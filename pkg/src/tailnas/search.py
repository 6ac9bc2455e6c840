"""Bilevel alternating search plus the two diagnostics that motivate the
fixed-classifier variant: per-class classifier-weight drift tracking and
power-iteration probing of the validation-loss Hessian w.r.t. alpha.
"""

from __future__ import annotations

import contextlib
import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from tailnas import optim, rebalance
from tailnas.autodiff import backward, functional as F, no_grad
from tailnas.autodiff.tensor import Tensor
from tailnas.errors import SearchAborted
from tailnas.layers import frozen_running_stats
from tailnas.util import to_jsonable


@contextlib.contextmanager
def params_frozen(params):
    """Mark weights non-differentiable so alpha-only backwards skip their GEMMs."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


@dataclass(frozen=True)
class WOptSpec:
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4


@dataclass(frozen=True)
class AlphaOptSpec:
    lr: float = 3e-4
    weight_decay: float = 1e-3
    betas: tuple = (0.5, 0.999)


@dataclass(frozen=True)
class HessianProbe:
    power_iters: int = 20
    fd_step: Optional[float] = None  # None: 1e-3 * (1 + max|alpha|)
    tol: float = 1e-4
    batch_cap: int = 256

    def __post_init__(self):
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")
        if self.fd_step is not None and self.fd_step <= 0:
            raise ValueError("fd_step must be positive")


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 12
    batch_size: int = 16
    w_opt: WOptSpec = WOptSpec()
    alpha_opt: AlphaOptSpec = AlphaOptSpec()
    order: str = "first"  # first | second
    classifier: str = "trainable"  # trainable | etf
    loss: rebalance.LossSpec = rebalance.LossSpec(kind="ce")
    probe: HessianProbe = HessianProbe()
    probe_every: Optional[int] = None  # None: never; n: at epochs n, 2n, ...
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be first or second, got {self.order!r}")
        if self.w_opt.lr <= 0 or self.alpha_opt.lr < 0:
            raise ValueError("learning rates must be positive (alpha lr may be 0)")
        if self.probe_every is not None and self.probe_every < 1:
            raise ValueError("probe_every must be >= 1 (or None to disable)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    balanced_acc: float
    alpha_hash: str
    cls_norms: list
    angle_min: float
    angle_max: float
    angle_mean: float
    angle_std: float
    mix_weight_max_dev: float
    lambda_max: Optional[float] = None
    probe_residual: Optional[float] = None
    probe_iters: Optional[int] = None
    probe_converged: Optional[bool] = None


@dataclass
class SearchTrace:
    n_classes: int
    records: list = field(default_factory=list)

    def csv_header(self):
        fixed = [
            "epoch", "train_loss", "val_loss", "balanced_acc", "alpha_hash",
            "mix_weight_max_dev", "lambda_max", "probe_residual", "probe_iters",
            "probe_converged", "norm_std", "angle_min", "angle_max", "angle_mean", "angle_std",
        ]
        return fixed + [f"norm_{c}" for c in range(self.n_classes)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.csv_header())
            for r in self.records:
                wr.writerow(self._row(r))

    def _row(self, r):
        fmt = lambda v: "" if v is None else repr(v)
        return [
            r.epoch, fmt(r.train_loss), fmt(r.val_loss), fmt(r.balanced_acc), r.alpha_hash,
            fmt(r.mix_weight_max_dev), fmt(r.lambda_max), fmt(r.probe_residual),
            "" if r.probe_iters is None else r.probe_iters,
            "" if r.probe_converged is None else int(r.probe_converged),
            fmt(float(np.std(r.cls_norms))),
            fmt(r.angle_min), fmt(r.angle_max), fmt(r.angle_mean), fmt(r.angle_std),
        ] + [fmt(v) for v in r.cls_norms]

    def norm_std_series(self):
        return [float(np.std(r.cls_norms)) for r in self.records]

    def final_lambda_max(self):
        vals = [r.lambda_max for r in self.records if r.lambda_max is not None]
        return vals[-1] if vals else None


@dataclass
class ProbeResult:
    value: float
    residual: float
    iterations: int
    converged: bool


def hessian_lambda_max(probe, grad_fn, alpha0, rng=None):
    """Dominant-magnitude eigenvalue of the Hessian behind grad_fn.

    Power iteration on central-difference Hessian-vector products
    Hv ~ [g(a+eps v) - g(a-eps v)] / (2 eps). Returns the Rayleigh quotient
    (signed) with its residual; flagged unconverged if power_iters run out.
    """
    rng = rng or np.random.default_rng(0)
    a0 = np.asarray(alpha0, dtype=np.float64)
    eps = probe.fd_step if probe.fd_step is not None else 1e-3 * (1.0 + np.abs(a0).max())
    v = rng.standard_normal(a0.size)
    v /= np.linalg.norm(v)
    lam_prev = None
    lam, residual, converged = 0.0, math.inf, False
    it = 0
    for it in range(1, probe.power_iters + 1):
        hv = (grad_fn(a0 + eps * v) - grad_fn(a0 - eps * v)) / (2.0 * eps)
        lam = float(v @ hv)
        residual = float(np.linalg.norm(hv - lam * v))
        norm_hv = float(np.linalg.norm(hv))
        if norm_hv < 1e-12:
            lam, residual, converged = 0.0, 0.0, True
            break
        v = hv / norm_hv
        if lam_prev is not None and abs(lam - lam_prev) <= probe.tol * max(1.0, abs(lam)):
            converged = True
            break
        lam_prev = lam
    return ProbeResult(value=lam, residual=residual, iterations=it, converged=converged)


def _classifier_angle_stats(weight):
    """Pairwise angles (degrees) between classifier columns."""
    norms = np.linalg.norm(weight, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    wn = weight / safe
    gram = np.clip(wn.T @ wn, -1.0, 1.0)
    iu = np.triu_indices(weight.shape[1], k=1)
    ang = np.degrees(np.arccos(gram[iu]))
    return norms, float(ang.min()), float(ang.max()), float(ang.mean()), float(ang.std())


def balanced_accuracy(forward_fn, dataset, batch_size=100):
    """Per-class mean accuracy; forward_fn maps an image Tensor to logits."""
    correct = np.zeros(dataset.n_classes)
    total = np.zeros(dataset.n_classes)
    with no_grad():
        for xb, yb in dataset.iter_batches(batch_size):
            preds = forward_fn(Tensor(xb)).data.argmax(axis=1)
            for c in range(dataset.n_classes):
                mask = yb == c
                total[c] += mask.sum()
                correct[c] += (preds[mask] == c).sum()
    present = total > 0
    if not present.all():
        raise ValueError(f"classes missing from evaluation set: {np.flatnonzero(~present).tolist()}")
    return float((correct[present] / total[present]).mean())


@dataclass
class SearchData:
    w_set: object
    alpha_set: object
    eval_set: object  # balanced test set used for the per-epoch diagnostic accuracy


def _check_finite(loss_value, what, snapshot):
    if not math.isfinite(loss_value):
        path = snapshot()
        raise SearchAborted(f"non-finite {what} loss ({loss_value}); snapshot at {path}", path)


def _mix_weight_dev(alpha):
    normal_w, reduce_w = alpha.mixing_weights()
    return float(max(abs(w.sum() - 1.0) for w in normal_w + reduce_w))


def search(config, data, net, step_callback=None, debug_dir=None):
    """Alternating bilevel optimization of (w, alpha) on the given supernet.

    Per step: alpha takes an Adam step on the validation half, then w takes
    an SGD step on the training half (first-order by default; the unrolled
    second-order correction is config.order == "second"). Running BN stats
    freeze during alpha-side forwards so the w trajectory is identical
    across orders when the alpha lr is zero.
    """
    if net.classifier_kind != config.classifier:
        raise ValueError(f"net classifier {net.classifier_kind!r} != config {config.classifier!r}")
    alpha = net.init_alpha(config.seed)
    w_params = net.parameters()
    w_opt = optim.SGD(w_params, lr=config.w_opt.lr, momentum=config.w_opt.momentum,
                      weight_decay=config.w_opt.weight_decay)
    a_opt = optim.Adam(alpha.tensors(), lr=config.alpha_opt.lr, betas=config.alpha_opt.betas,
                       weight_decay=config.alpha_opt.weight_decay)
    rng_w = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    rng_a = np.random.default_rng(np.random.SeedSequence([config.seed, 12]))
    rng_probe = np.random.default_rng(np.random.SeedSequence([config.seed, 13]))
    trace = SearchTrace(n_classes=data.eval_set.n_classes)

    def snapshot():
        path = f"{debug_dir or '.'}/search_abort_seed{config.seed}.json"
        payload = {
            "alpha": alpha.as_vector().tolist(),
            "trace_epochs": len(trace.records),
            "rng_w_state": to_jsonable(rng_w.bit_generator.state),
            "rng_a_state": to_jsonable(rng_a.bit_generator.state),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)
        return path

    probe_batch = _probe_batch(data.alpha_set, config.probe.batch_cap,
                               np.random.default_rng(np.random.SeedSequence([config.seed, 14])))

    step_index = 0
    for epoch in range(1, config.epochs + 1):
        w_opt.lr = optim.cosine_lr(config.w_opt.lr, epoch - 1, config.epochs)
        alpha_batches = _cycle_batches(data.alpha_set, config.batch_size, rng_a)
        train_losses, val_losses = [], []
        for xw, yw in data.w_set.iter_batches(config.batch_size, rng_w):
            xa, ya = next(alpha_batches)
            val_loss = _alpha_step(config, net, alpha, a_opt, w_params, w_opt, xa, ya, xw, yw)
            _check_finite(val_loss, "validation", snapshot)
            val_losses.append(val_loss)

            w_opt.zero_grad()
            logits = net(Tensor(xw), alpha, True)
            tr_loss = rebalance.loss(config.loss, logits, yw, epoch_fraction=(epoch - 1) / config.epochs)
            backward(tr_loss)
            optim.clip_grad_norm(w_params, config.grad_clip)
            w_opt.step()
            _check_finite(tr_loss.item(), "training", snapshot)
            train_losses.append(tr_loss.item())
            step_index += 1
            if step_callback is not None:
                step_callback(step_index, alpha, net)

        acc = balanced_accuracy(lambda x: net(x, alpha, False), data.eval_set)
        norms, ang_min, ang_max, ang_mean, ang_std = _classifier_angle_stats(net.classifier_weight())
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(train_losses)) if train_losses else math.nan,
            val_loss=float(np.mean(val_losses)) if val_losses else math.nan,
            balanced_acc=acc,
            alpha_hash=alpha.hash_hex(),
            cls_norms=[float(v) for v in norms],
            angle_min=ang_min, angle_max=ang_max, angle_mean=ang_mean, angle_std=ang_std,
            mix_weight_max_dev=_mix_weight_dev(alpha),
        )
        if config.probe_every is not None and epoch % config.probe_every == 0:
            result = probe_alpha_hessian(config.probe, net, alpha, probe_batch, rng_probe)
            record.lambda_max = result.value
            record.probe_residual = result.residual
            record.probe_iters = result.iterations
            record.probe_converged = result.converged
        trace.records.append(record)
    return alpha, trace


def _probe_batch(dataset, cap, rng):
    if len(dataset) <= cap:
        return dataset.images, dataset.labels
    idx = np.sort(rng.choice(len(dataset), size=cap, replace=False))
    return dataset.images[idx], dataset.labels[idx]


def probe_alpha_hessian(probe, net, alpha, batch, rng):
    """lambda_max of the validation loss Hessian w.r.t. alpha at the current point.

    Runs in eval mode on a fixed batch so every gradient evaluation sees
    the same deterministic loss surface; alpha is restored afterwards.
    """
    images, labels = batch
    x = Tensor(images)
    saved = alpha.copy_values()

    def grad_fn(vec):
        alpha.load_vector(vec)
        for t in alpha.tensors():
            t.grad = None
        with frozen_running_stats(), params_frozen(net.parameters()):
            loss = F.cross_entropy(net(x, alpha, False), labels)
            backward(loss)
        return np.concatenate([
            t.grad.copy() if t.grad is not None else np.zeros(t.size) for t in alpha.tensors()
        ])

    try:
        return hessian_lambda_max(probe, grad_fn, saved, rng)
    finally:
        alpha.load_vector(saved)
        for t in alpha.tensors():
            t.grad = None


def _cycle_batches(dataset, batch_size, rng):
    while True:
        yield from dataset.iter_batches(batch_size, rng)


def _alpha_step(config, net, alpha, a_opt, w_params, w_opt, xa, ya, xw, yw):
    """Adam step on alpha from the validation loss; returns that loss."""
    a_opt.zero_grad()
    if config.order == "first":
        with frozen_running_stats(), params_frozen(w_params):
            loss = F.cross_entropy(net(Tensor(xa), alpha, True), ya)
            backward(loss)
        a_opt.step()
        return loss.item()
    return _alpha_step_second(config, net, alpha, a_opt, w_params, w_opt, xa, ya, xw, yw)


def _alpha_step_second(config, net, alpha, a_opt, w_params, w_opt, xa, ya, xw, yw):
    """Unrolled one-step approximation of the bilevel gradient.

    grad_alpha = dL_val(w', alpha) - xi * [dL_train(w+, alpha) - dL_train(w-, alpha)] / (2 eps)
    with w' a virtual SGD step and w+- = w +- eps * dL_val/dw'. All weight
    state (params, momentum) is restored bit-exactly afterwards.
    """
    xi = w_opt.lr
    saved = [p.data.copy() for p in w_params]
    with frozen_running_stats():
        # dL_train/dw at w
        for p in w_params:
            p.grad = None
        backward(rebalance.loss(config.loss, net(Tensor(xw), alpha, True), yw))
        # virtual step w' (same rule as the real SGD, on scratch state)
        for p, buf in zip(w_params, w_opt._buf):
            g = (p.grad if p.grad is not None else 0.0) + config.w_opt.weight_decay * p.data
            p.data -= xi * (w_opt.momentum * buf + g)
        # dL_val at (w', alpha): alpha part is the first term; w part drives the correction
        for t in alpha.tensors():
            t.grad = None
        for p in w_params:
            p.grad = None
        val_loss = F.cross_entropy(net(Tensor(xa), alpha, True), ya)
        backward(val_loss)
        g_alpha = [t.grad.copy() if t.grad is not None else np.zeros(t.shape) for t in alpha.tensors()]
        v = [p.grad.copy() if p.grad is not None else np.zeros(p.shape) for p in w_params]
        v_norm = math.sqrt(sum(float((g * g).sum()) for g in v))
        if v_norm > 1e-12:
            eps = 0.01 / v_norm
            with params_frozen(w_params):
                for sign in (+1.0, -1.0):
                    for p, w0, gv in zip(w_params, saved, v):
                        p.data[...] = w0 + sign * eps * gv
                    for t in alpha.tensors():
                        t.grad = None
                    backward(rebalance.loss(config.loss, net(Tensor(xw), alpha, True), yw))
                    scale = sign * xi / (2.0 * eps)
                    for ga, t in zip(g_alpha, alpha.tensors()):
                        if t.grad is not None:
                            ga -= scale * t.grad
    for p, w0 in zip(w_params, saved):
        p.data[...] = w0
        p.grad = None
    for ga, t in zip(g_alpha, alpha.tensors()):
        t.grad = ga
    a_opt.step()
    return val_loss.item()


# ---------------------------------------------------------------------------
# classifier-bias report
# ---------------------------------------------------------------------------

_BIAS_FIXED = ["epoch", "norm_std", "norm_std_ratio", "norm_drift", "angle_min", "angle_max", "angle_mean", "angle_std"]


def classifier_bias_report(trace):
    """Per-epoch norm/angle summaries with drift statistics, CSV-serializable.

    norm_std_ratio is relative to the first epoch; norm_drift is the mean
    absolute per-class norm change since the previous epoch.
    """
    if not trace.records:
        raise ValueError("empty trace")
    base_std = float(np.std(trace.records[0].cls_norms))
    rows = []
    prev = None
    for r in trace.records:
        norms = np.asarray(r.cls_norms)
        std = float(norms.std())
        drift = float(np.abs(norms - prev).mean()) if prev is not None else 0.0
        rows.append({
            "epoch": r.epoch,
            "norm_std": std,
            "norm_std_ratio": std / base_std if base_std > 0 else math.inf if std > 0 else 1.0,
            "norm_drift": drift,
            "angle_min": r.angle_min,
            "angle_max": r.angle_max,
            "angle_mean": r.angle_mean,
            "angle_std": r.angle_std,
            "norms": [float(v) for v in norms],
        })
        prev = norms
    return rows


def bias_report_to_csv(rows, path):
    n = len(rows[0]["norms"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(_BIAS_FIXED + [f"norm_{c}" for c in range(n)])
        for row in rows:
            wr.writerow([row[k] if k == "epoch" else repr(float(row[k])) for k in _BIAS_FIXED]
                        + [repr(v) for v in row["norms"]])


def bias_report_from_csv(path):
    rows = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        n = sum(1 for h in header if h.startswith("norm_") and h[5:].isdigit())
        for rec in rd:
            row = {k: (int(rec[i]) if k == "epoch" else float(rec[i])) for i, k in enumerate(_BIAS_FIXED)}
            row["norms"] = [float(v) for v in rec[len(_BIAS_FIXED):len(_BIAS_FIXED) + n]]
            rows.append(row)
    return rows
