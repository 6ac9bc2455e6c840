"""Experiment suites: single search, component exploration, operation
comparison, ablation, and the paired trainable-vs-ETF collapse study.

Every cell is a pure function of (config, seed); rows carry seed and
config hash so any table cell can be traced to its run.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from tailnas import catalog, data, rebalance, search, supernet as sn, train_eval
from tailnas.autodiff import backward, no_grad
from tailnas.autodiff.tensor import Tensor
from tailnas.errors import ConfigError
from tailnas.explore_blocks import ACTIVATIONS, CONV_KINDS, NORMS, PLACEMENTS, TOPOLOGIES, ExploreNet
from tailnas.layers import Module
from tailnas.util import to_jsonable


@dataclass
class SuiteResult:
    name: str
    columns: list
    rows: list = field(default_factory=list)  # list of dicts
    summary: dict = field(default_factory=dict)

    def add(self, **row):
        self.rows.append(row)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.columns)
            for row in self.rows:
                wr.writerow([_cell(row.get(c)) for c in self.columns])

    def aggregate(self, group_keys, value_key):
        """mean +/- std over seeds, formatted like '65.68±0.25' (percent points)."""
        groups = {}
        for row in self.rows:
            key = tuple(row[k] for k in group_keys)
            groups.setdefault(key, []).append(row[value_key])
        out = {}
        for key, vals in groups.items():
            arr = np.asarray(vals, dtype=np.float64) * 100.0
            out[key] = f"{arr.mean():.2f}±{arr.std():.2f}"
        return out


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def mean_std_label(values):
    arr = np.asarray(values, dtype=np.float64) * 100.0
    return f"{arr.mean():.2f}±{arr.std():.2f}"


# ---------------------------------------------------------------------------
# single search cell
# ---------------------------------------------------------------------------


@dataclass
class SearchCell:
    genotype: dict
    trace: search.SearchTrace
    alpha_vector: np.ndarray
    supernet_config: sn.SupernetConfig
    data_spec: data.LongTailSpec


def run_search_cell(cfg, seed, classifier=None, rho=None, catalog_names=None, step_callback=None):
    """One full search: synthesize data, split, search, derive."""
    spec = cfg.data_spec(rho=rho)
    train, test = data.synthesize(spec)
    w_set, a_set = data.bilevel_split(train, cfg["search"]["split_fraction"], seed=seed)
    net_cfg = cfg.supernet_config(classifier=classifier)
    if catalog_names is not None:
        net_cfg = sn.SupernetConfig(**{**net_cfg.__dict__, "catalog": tuple(catalog_names)})
    net = sn.Supernet(net_cfg, seed=seed)
    scfg = cfg.search_config(data.class_counts(spec), seed=seed, classifier=classifier)
    bundle = search.SearchData(w_set=w_set, alpha_set=a_set, eval_set=test)
    alpha, trace = search.search(scfg, bundle, net, step_callback=step_callback)
    meta = {"seed": seed, "epoch": scfg.epochs, "config_hash": cfg.hash()}
    genotype = sn.derive_genotype(alpha, net_cfg, meta=meta)
    return SearchCell(genotype=genotype, trace=trace, alpha_vector=alpha.as_vector(),
                      supernet_config=net_cfg, data_spec=spec)


def retrain_cell(cfg, cell, seed, classifier="trainable"):
    """Retrain a derived genotype from scratch and evaluate it."""
    spec = cell.data_spec
    train, test = data.synthesize(spec)
    counts = data.class_counts(spec)
    tcfg = cfg.train_config(counts, seed=seed, classifier=classifier)
    net_cfg = cell.supernet_config
    net, curve, crt_result = train_eval.train_from_scratch(cell.genotype, net_cfg, tcfg, train, test)
    report = train_eval.evaluate(net, test, counts, seed=seed, cfg_hash=cfg.hash())
    return net, curve, report, crt_result


# ---------------------------------------------------------------------------
# fixed-backbone training (exploration and operation comparison)
# ---------------------------------------------------------------------------


def _train_small(net, train_set, test_set, epochs, batch_size, lr, seed, loss_spec=None):
    from tailnas import optim

    loss_spec = loss_spec or rebalance.LossSpec(kind="ce")
    params = net.parameters()
    opt = optim.SGD(params, lr=lr, momentum=0.9, weight_decay=3e-4)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    for epoch in range(1, epochs + 1):
        opt.lr = optim.cosine_lr(lr, epoch - 1, epochs)
        for xb, yb in train_set.iter_batches(batch_size, rng):
            opt.zero_grad()
            loss = rebalance.loss(loss_spec, net(Tensor(xb), True), yb, (epoch - 1) / epochs)
            backward(loss)
            optim.clip_grad_norm(params, 5.0)
            opt.step()
    return search.balanced_accuracy(lambda x: net(x, False), test_set)


EXPLORE_AXES = {
    "topology": [("topology", t) for t in TOPOLOGIES],
    "convolution": [("conv_kind", k) for k in CONV_KINDS],
    "activation_placement": [("placement", p) for p in PLACEMENTS],
    "activation_kind": [("act", a) for a in ACTIVATIONS],
    "normalization": [("norm", n) for n in NORMS],
}


def run_explore(cfg, axis, epochs=8):
    """Vary one architectural axis on the fixed residual stack."""
    if axis not in EXPLORE_AXES:
        raise ConfigError(f"unknown explore axis {axis!r}; known: {sorted(EXPLORE_AXES)}")
    result = SuiteResult(
        name=f"explore_{axis}",
        columns=["axis", "variant", "rho", "seed", "balanced_acc", "param_count", "config_hash"],
    )
    rhos = cfg.suite_rhos()
    if 1.0 not in rhos:
        rhos = [1.0] + rhos  # balanced control row for every axis
    ch = cfg.hash()
    for key, variant in EXPLORE_AXES[axis]:
        for rho in rhos:
            for seed in cfg.suite_seeds():
                spec = cfg.data_spec(rho=rho)
                train, test = data.synthesize(spec)
                net = ExploreNet(spec.image_size[0], spec.n_classes, seed=seed, **{key: variant})
                acc = _train_small(net, train, test, epochs, cfg["train"]["batch_size"],
                                   cfg["train"]["lr"], seed)
                result.add(axis=axis, variant=variant, rho=rho, seed=seed,
                           balanced_acc=acc, param_count=net.param_count(), config_hash=ch)
    result.summary = {
        "mean_std": {f"{k}|rho={r}": v for (k, r), v in
                     result.aggregate(["variant", "rho"], "balanced_acc").items()},
        "expected_direction": _explore_direction(result, axis),
    }
    return result


def _explore_direction(result, axis):
    """Directional sanity of the exploration findings (reported, not asserted)."""
    means = {}
    for row in result.rows:
        if row["rho"] == 1.0:
            continue
        means.setdefault(row["variant"], []).append(row["balanced_acc"])
    means = {k: float(np.mean(v)) for k, v in means.items()}
    checks = {}
    if axis == "topology" and {"basic", "bottleneck"} <= means.keys():
        checks["bottleneck_beats_basic"] = means["bottleneck"] >= means["basic"]
    if axis == "activation_kind" and {"relu", "sigmoid"} <= means.keys():
        checks["relu_beats_sigmoid"] = means["relu"] >= means["sigmoid"]
    if axis == "normalization" and {"batchnorm", "none"} <= means.keys():
        checks["batchnorm_beats_none"] = means["batchnorm"] >= means["none"]
    if axis == "convolution" and {"aggregated", "se"} <= means.keys():
        checks["aggregated_beats_se"] = means["aggregated"] >= means["se"]
    return checks


class _OpBackbone(Module):
    """stem -> op(s1) -> op(s2) -> op(s1) -> pooled linear head."""

    def __init__(self, kind, image_channels, n_classes, width=16, seed=0):
        super().__init__()
        from tailnas.layers import BatchNorm2d, Conv2d, GlobalAvgPool, Linear

        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0BB]))
        self.stem_conv = Conv2d(image_channels, width, 3, 1, 1, rng=rng)
        self.stem_bn = BatchNorm2d(width)
        mk = lambda stride, key: catalog.build_op(
            kind, width, width, stride,
            int(np.random.SeedSequence([seed, 0x0BB, key]).generate_state(1)[0]))
        self.op1 = mk(1, 1)
        self.op2 = mk(2, 2)
        self.op3 = mk(1, 3)
        self.pool = GlobalAvgPool()
        self.head = Linear(width, n_classes, rng=rng)

    def forward(self, x, train):
        from tailnas.autodiff import functional as F

        y = F.relu(self.stem_bn(self.stem_conv(x, train), train))
        y = self.op3(self.op2(self.op1(y, train), train), train)
        return self.head(self.pool(y, train), train)


OPCOMPARE_KINDS = ("dil_conv_3x3", "sep_conv_3x3", "lt_agg_conv", "lt_hier_conv")


def run_opcompare(cfg, epochs=10):
    """Fixed backbone, one row per transform operation (catalog order)."""
    result = SuiteResult(
        name="opcompare",
        columns=["operation", "seed", "balanced_acc", "param_count", "sep5_param_count",
                 "param_ratio_vs_sep5", "config_hash"],
    )
    ch = cfg.hash()
    spec = cfg.data_spec()
    train, test = data.synthesize(spec)
    width = 16
    sep5 = catalog.build_op("sep_conv_5x5", width, width, 1, 0).param_count()
    for kind in sorted(OPCOMPARE_KINDS, key=catalog.catalog_index):
        op_params = catalog.build_op(kind, width, width, 1, 0).param_count()
        for seed in cfg.suite_seeds():
            net = _OpBackbone(kind, spec.image_size[0], spec.n_classes, width=width, seed=seed)
            acc = _train_small(net, train, test, epochs, cfg["train"]["batch_size"],
                               cfg["train"]["lr"], seed)
            result.add(operation=kind, seed=seed, balanced_acc=acc,
                       param_count=op_params, sep5_param_count=sep5,
                       param_ratio_vs_sep5=op_params / sep5, config_hash=ch)
    agg = result.aggregate(["operation"], "balanced_acc")
    means = {k: float(np.mean([r["balanced_acc"] for r in result.rows if r["operation"] == k]))
             for k in OPCOMPARE_KINDS}
    result.summary = {
        "mean_std": {k[0]: v for k, v in agg.items()},
        "new_ops_beat_originals": max(means["lt_agg_conv"], means["lt_hier_conv"])
        > max(means["dil_conv_3x3"], means["sep_conv_3x3"]),
        "param_guard_max_ratio": max(r["param_ratio_vs_sep5"] for r in result.rows),
    }
    return result


ABLATION_ROWS = (
    ("vanilla", "vanilla", "trainable"),
    ("+conv", "full", "trainable"),
    ("+conv+etf", "full", "etf"),
)


def run_ablate(cfg):
    """Three-row ablation: baseline catalog, +new ops, +new ops +ETF search."""
    result = SuiteResult(
        name="ablate",
        columns=["row", "seed", "search_acc", "retrain_acc", "skip_fraction",
                 "param_count", "config_hash"],
    )
    ch = cfg.hash()
    for label, cat_key, classifier in ABLATION_ROWS:
        names = catalog.VANILLA_CATALOG if cat_key == "vanilla" else catalog.CATALOG_ORDER
        for seed in cfg.suite_seeds():
            cell = run_search_cell(cfg, seed, classifier=classifier, catalog_names=names)
            _, _, report, _ = retrain_cell(cfg, cell, seed, classifier="trainable")
            result.add(row=label, seed=seed,
                       search_acc=cell.trace.records[-1].balanced_acc,
                       retrain_acc=report.overall,
                       skip_fraction=sn.skip_fraction(cell.genotype),
                       param_count=report.param_count, config_hash=ch)
    means = {label: float(np.mean([r["retrain_acc"] for r in result.rows if r["row"] == label]))
             for label, _, _ in ABLATION_ROWS}
    result.summary = {
        "mean_std": {k[0]: v for k, v in result.aggregate(["row"], "retrain_acc").items()},
        "ordering_ok": means["vanilla"] <= means["+conv"] <= means["+conv+etf"]
        and means["vanilla"] < means["+conv+etf"],
        "means": means,
    }
    return result


def run_collapse(cfg):
    """Matched-seed trainable-vs-ETF searches with probes and retraining."""
    rows = SuiteResult(
        name="collapse",
        columns=["arm", "seed", "lambda_max", "probe_converged", "search_acc",
                 "retrain_acc", "skip_fraction", "config_hash"],
    )
    ch = cfg.hash()
    cells = {}
    for arm in ("trainable", "etf"):
        for seed in cfg.suite_seeds():
            cell = run_search_cell(cfg, seed, classifier=arm)
            _, curve, report, _ = retrain_cell(cfg, cell, seed, classifier="trainable")
            last = cell.trace.records[-1]
            rows.add(arm=arm, seed=seed, lambda_max=cell.trace.final_lambda_max(),
                     probe_converged=last.probe_converged,
                     search_acc=last.balanced_acc, retrain_acc=report.overall,
                     skip_fraction=sn.skip_fraction(cell.genotype), config_hash=ch)
            cells[(arm, seed)] = (cell, curve)
    lam = {arm: [r["lambda_max"] for r in rows.rows if r["arm"] == arm] for arm in ("trainable", "etf")}
    acc = {arm: [r["retrain_acc"] for r in rows.rows if r["arm"] == arm] for arm in ("trainable", "etf")}
    skip = {arm: [r["skip_fraction"] for r in rows.rows if r["arm"] == arm] for arm in ("trainable", "etf")}
    med = lambda v: float(np.median([x for x in v if x is not None]))
    paired_acc_wins = sum(e >= t for e, t in zip(acc["etf"], acc["trainable"]))
    rows.summary = {
        "median_lambda_max": {arm: med(v) for arm, v in lam.items()},
        "etf_lambda_not_larger": med(lam["etf"]) <= med(lam["trainable"]),
        "strictly_smaller": med(lam["etf"]) < med(lam["trainable"]),
        "etf_retrain_wins": int(paired_acc_wins),
        "n_seeds": len(cfg.suite_seeds()),
        "mean_skip_fraction": {arm: float(np.mean(v)) for arm, v in skip.items()},
    }
    return rows, cells
