"""Softmax-relaxed search network: DAG cells of mixed operations.

Every edge of a cell holds all catalog operations; the edge output is the
softmax(alpha)-weighted sum of their outputs. Discretization keeps, per
node, the two incoming edges whose strongest non-zero operation has the
largest mixing weight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from tailnas import catalog, etf
from tailnas.autodiff import functional as F
from tailnas.autodiff.tensor import Tensor
from tailnas.errors import ShapeError
from tailnas.layers import (
    BatchNorm2d,
    Conv2d,
    FactorizedReduce,
    Linear,
    Module,
    ModuleList,
    ReLUConvBN,
    Sequential,
)
from tailnas.util import array_hash


def _rng_for(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _op_seed(seed, *keys):
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class CellSpec:
    n_nodes: int = 4
    n_inputs: int = 2
    multiplier: int = 4

    def edges(self):
        """All (source, target) pairs, target over intermediate nodes."""
        out = []
        for dst in range(self.n_inputs, self.n_inputs + self.n_nodes):
            for src in range(dst):
                out.append((src, dst))
        return out

    @property
    def n_edges(self):
        return len(self.edges())


def default_reductions(n_cells):
    return tuple(sorted({n_cells // 3, (2 * n_cells) // 3} & set(range(n_cells))))


@dataclass(frozen=True)
class SupernetConfig:
    n_cells: int = 5
    init_channels: int = 8
    n_nodes: int = 4
    multiplier: int = 4
    stem_multiplier: int = 3
    n_classes: int = 10
    image_channels: int = 3
    classifier: str = "trainable"  # trainable | etf
    etf_norm: float = 1.0
    reductions: Optional[tuple] = None
    catalog: tuple = catalog.CATALOG_ORDER

    def __post_init__(self):
        if self.classifier not in ("trainable", "etf"):
            raise ValueError(f"classifier must be trainable or etf, got {self.classifier!r}")
        bad = [k for k in self.catalog if k not in catalog.CATALOG_ORDER]
        if bad:
            raise ValueError(f"unknown catalog entries {bad}")
        if self.reductions is not None and any(not 0 <= r < self.n_cells for r in self.reductions):
            raise ValueError(f"reduction positions {self.reductions} out of range for {self.n_cells} cells")

    def reduction_positions(self):
        return self.reductions if self.reductions is not None else default_reductions(self.n_cells)

    def cell_spec(self):
        return CellSpec(n_nodes=self.n_nodes, multiplier=self.multiplier)


class ArchParams:
    """Per-edge operation-mixing logits for the normal and reduction cells."""

    def __init__(self, alpha_normal, alpha_reduce):
        self.alpha_normal = list(alpha_normal)
        self.alpha_reduce = list(alpha_reduce)

    @classmethod
    def initialize(cls, n_edges, n_ops, seed):
        rng = _rng_for(seed, 0xA19A)
        make = lambda: Tensor(1e-3 * rng.standard_normal(n_ops), requires_grad=True)
        return cls([make() for _ in range(n_edges)], [make() for _ in range(n_edges)])

    def tensors(self):
        return self.alpha_normal + self.alpha_reduce

    def as_vector(self):
        return np.concatenate([t.data for t in self.tensors()])

    def load_vector(self, vec):
        pos = 0
        for t in self.tensors():
            t.data[...] = vec[pos : pos + t.size]
            pos += t.size
        if pos != vec.size:
            raise ShapeError(f"alpha vector length {vec.size} != expected {pos}")

    def copy_values(self):
        return self.as_vector().copy()

    def hash_hex(self):
        return array_hash([t.data for t in self.tensors()])

    def mixing_weights(self):
        """softmax per edge, as plain arrays: (normal list, reduce list)."""
        soft = lambda v: np.exp(v - v.max()) / np.exp(v - v.max()).sum()
        return ([soft(t.data) for t in self.alpha_normal], [soft(t.data) for t in self.alpha_reduce])


def mixed_op(x, edge_ops, alpha_edge, train=True):
    """Eq-style softmax mixture: sum_o softmax(alpha)_o * o(x)."""
    if len(edge_ops) != alpha_edge.size:
        raise ShapeError(f"{len(edge_ops)} ops vs {alpha_edge.size} logits on edge")
    weights = F.softmax(alpha_edge, axis=0)
    outs = [op(x, train) for op in edge_ops]
    ref = outs[0].shape
    for op, o in zip(edge_ops, outs):
        if o.shape != ref:
            raise ShapeError(f"op {op.kind} broke the edge shape contract: {o.shape} vs {ref}")
    return F.weighted_sum(outs, weights)


class MixedOp(Module):
    def __init__(self, names, c, stride, seed_keys, base_seed):
        super().__init__()
        self.ops = ModuleList(
            [catalog.build_op(k, c, c, stride, _op_seed(base_seed, *seed_keys, i)) for i, k in enumerate(names)]
        )

    def forward_mixed(self, x, alpha_edge, train):
        return mixed_op(x, list(self.ops), alpha_edge, train)


class Cell(Module):
    def __init__(self, spec, names, c_pp, c_p, c, reduction, reduction_prev, base_seed, cell_idx):
        super().__init__()
        self.spec = spec
        self.reduction = reduction
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, rng=_rng_for(base_seed, cell_idx, 900))
        else:
            self.pre0 = ReLUConvBN(c_pp, c, rng=_rng_for(base_seed, cell_idx, 901))
        self.pre1 = ReLUConvBN(c_p, c, rng=_rng_for(base_seed, cell_idx, 902))
        ops = []
        for e, (src, dst) in enumerate(spec.edges()):
            stride = 2 if reduction and src < spec.n_inputs else 1
            ops.append(MixedOp(names, c, stride, (cell_idx, e), base_seed))
        self.edge_ops = ModuleList(ops)

    def forward(self, s0, s1, alpha_edges, train):
        """alpha_edges are raw per-edge logits; mixed_op applies the softmax."""
        states = [self.pre0(s0, train), self.pre1(s1, train)]
        e = 0
        for dst in range(self.spec.n_inputs, self.spec.n_inputs + self.spec.n_nodes):
            acc = None
            for src in range(dst):
                y = self.edge_ops[e].forward_mixed(states[src], alpha_edges[e], train)
                acc = y if acc is None else F.add(acc, y)
                e += 1
            states.append(acc)
        return F.concat(states[-self.spec.multiplier:], axis=1)


class EtfHead(Module):
    def __init__(self, d, n_classes, e_w, seed):
        super().__init__()
        self.etf = etf.build_etf(d, n_classes, e_w, seed)
        self.weight = Tensor(self.etf.W)  # frozen

    def forward(self, feats, train):
        return F.matmul(feats, self.weight)


class _NetworkBase(Module):
    """Shared stem/cells/classifier assembly and the retraining interface."""

    classifier_kind = "trainable"

    def head_logits(self, feats, train):
        return self.classifier(feats, train)

    def classifier_weight(self):
        """(d, C) classifier matrix; column j belongs to class j."""
        return self.classifier.weight.data

    def classifier_parameters(self):
        return self.classifier.parameters()

    def backbone_state(self):
        cls_names = {name for name, _ in self.classifier.named_tensors("classifier.")}
        out = [(n, t.data) for n, t in self.named_tensors() if n not in cls_names]
        cls_buf = {name for name, _ in self.classifier.named_buffers("classifier.")}
        out += [(n, a) for n, a in self.named_buffers() if n not in cls_buf]
        return out

    def reinit_classifier(self, rng):
        if self.classifier_kind == "etf":
            raise ValueError("cannot reinitialize a fixed ETF classifier")
        self.classifier = Linear(self.feature_dim, self.n_classes, rng=rng)

    def _build_classifier(self, kind, d, n_classes, e_w, seed):
        self.feature_dim = d
        self.n_classes = n_classes
        self.classifier_kind = kind
        if kind == "etf":
            if d < n_classes:
                raise ShapeError(
                    f"feature width {d} < {n_classes} classes; raise channels for an ETF head"
                )
            self.classifier = EtfHead(d, n_classes, e_w, seed)
        else:
            self.classifier = Linear(d, n_classes, rng=_rng_for(seed, 0xC125))


class Supernet(_NetworkBase):
    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config
        self.seed = seed
        spec = config.cell_spec()
        self.spec = spec
        reductions = config.reduction_positions()
        c_curr = config.init_channels * config.stem_multiplier
        self.stem = Sequential(
            Conv2d(config.image_channels, c_curr, 3, 1, 1, rng=_rng_for(seed, 0x57E0)),
            BatchNorm2d(c_curr),
        )
        cells = []
        c_pp, c_p, c = c_curr, c_curr, config.init_channels
        reduction_prev = False
        for i in range(config.n_cells):
            reduction = i in reductions
            if reduction:
                c *= 2
            cells.append(Cell(spec, config.catalog, c_pp, c_p, c, reduction, reduction_prev, seed, i))
            reduction_prev = reduction
            c_pp, c_p = c_p, c * spec.multiplier
        self.cells = ModuleList(cells)
        self._build_classifier(config.classifier, c_p, config.n_classes, config.etf_norm, seed)

    def init_alpha(self, seed=None):
        return ArchParams.initialize(self.spec.n_edges, len(self.config.catalog), self.seed if seed is None else seed)

    def _check_batch(self, x):
        n_red = len(self.config.reduction_positions())
        div = 2**n_red
        if x.ndim != 4 or x.shape[1] != self.config.image_channels:
            raise ShapeError(f"batch {x.shape} does not match image channels {self.config.image_channels}")
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(f"spatial size {x.shape[2:]} must be divisible by {div}")

    def features(self, x, alpha, train):
        self._check_batch(x)
        s0 = s1 = self.stem(x, train)
        for cell in self.cells:
            logits = alpha.alpha_reduce if cell.reduction else alpha.alpha_normal
            s0, s1 = s1, cell(s0, s1, logits, train)
        return F.global_avg_pool(s1)

    def forward(self, x, alpha, train):
        return self.head_logits(self.features(x, alpha, train), train)


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


def derive_genotype(alpha, config, meta=None):
    """argmax discretization: per node keep the top-2 edges by best non-zero op.

    Ties break deterministically by (edge index, catalog index).
    """
    spec = config.cell_spec()
    names = config.catalog
    genotype = {}
    normal_w, reduce_w = alpha.mixing_weights()
    for cell_type, weights in (("normal", normal_w), ("reduce", reduce_w)):
        if len(weights) != spec.n_edges:
            raise ShapeError(f"{len(weights)} alpha edges vs cell spec {spec.n_edges}")
        entries = []
        edges = spec.edges()
        e = 0
        for dst in range(spec.n_inputs, spec.n_inputs + spec.n_nodes):
            candidates = []
            for src in range(dst):
                w = weights[e]
                ranked = sorted(
                    (i for i, k in enumerate(names) if k != "zero"),
                    key=lambda i: (-w[i], i),
                )
                best = ranked[0]
                candidates.append((-w[best], e, src, names[best]))
                e += 1
            for _, _, src, op_name in sorted(candidates)[:2]:
                entries.append([dst, src, op_name])
        genotype[cell_type] = sorted(entries, key=lambda t: (t[0], t[1]))
    genotype["meta"] = dict(meta or {})
    return genotype


def genotype_to_json(genotype):
    """Stable field order for byte-reproducible files."""
    ordered = {
        "normal": genotype["normal"],
        "reduce": genotype["reduce"],
        "meta": {k: genotype.get("meta", {})[k] for k in sorted(genotype.get("meta", {}))},
    }
    return json.dumps(ordered, indent=2) + "\n"


def genotype_from_json(text):
    g = json.loads(text)
    return {"normal": [list(e) for e in g["normal"]],
            "reduce": [list(e) for e in g["reduce"]],
            "meta": dict(g.get("meta", {}))}


def skip_fraction(genotype):
    ops = [op for ct in ("normal", "reduce") for _, _, op in genotype[ct]]
    return sum(op == "skip_connect" for op in ops) / len(ops)


class DiscreteCell(Module):
    def __init__(self, entries, spec, c_pp, c_p, c, reduction, reduction_prev, base_seed, cell_idx):
        super().__init__()
        self.spec = spec
        self.reduction = reduction
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, rng=_rng_for(base_seed, cell_idx, 900))
        else:
            self.pre0 = ReLUConvBN(c_pp, c, rng=_rng_for(base_seed, cell_idx, 901))
        self.pre1 = ReLUConvBN(c_p, c, rng=_rng_for(base_seed, cell_idx, 902))
        self.wiring = [(dst, src, op) for dst, src, op in entries]
        ops = []
        for j, (dst, src, op_name) in enumerate(self.wiring):
            stride = 2 if reduction and src < spec.n_inputs else 1
            ops.append(catalog.build_op(op_name, c, c, stride, _op_seed(base_seed, cell_idx, 777, j)))
        self.ops = ModuleList(ops)

    def forward(self, s0, s1, train):
        states = [self.pre0(s0, train), self.pre1(s1, train)]
        by_dst = {}
        for j, (dst, src, _) in enumerate(self.wiring):
            by_dst.setdefault(dst, []).append((j, src))
        for dst in range(self.spec.n_inputs, self.spec.n_inputs + self.spec.n_nodes):
            acc = None
            for j, src in by_dst[dst]:
                y = self.ops[j](states[src], train)
                acc = y if acc is None else F.add(acc, y)
            states.append(acc)
        return F.concat(states[-self.spec.multiplier:], axis=1)


class DiscreteNetwork(_NetworkBase):
    def __init__(self, genotype, config, classifier=None, seed=0):
        super().__init__()
        self.genotype = genotype
        self.config = config
        spec = config.cell_spec()
        nodes_seen = {dst for dst, _, _ in genotype["normal"]}
        if nodes_seen != set(range(spec.n_inputs, spec.n_inputs + spec.n_nodes)):
            raise ShapeError(
                f"genotype nodes {sorted(nodes_seen)} do not match config n_nodes={spec.n_nodes}"
            )
        reductions = config.reduction_positions()
        c_curr = config.init_channels * config.stem_multiplier
        self.stem = Sequential(
            Conv2d(config.image_channels, c_curr, 3, 1, 1, rng=_rng_for(seed, 0x57E0)),
            BatchNorm2d(c_curr),
        )
        cells = []
        c_pp, c_p, c = c_curr, c_curr, config.init_channels
        reduction_prev = False
        for i in range(config.n_cells):
            reduction = i in reductions
            if reduction:
                c *= 2
            entries = genotype["reduce"] if reduction else genotype["normal"]
            cells.append(DiscreteCell(entries, spec, c_pp, c_p, c, reduction, reduction_prev, seed, i))
            reduction_prev = reduction
            c_pp, c_p = c_p, c * spec.multiplier
        self.cells = ModuleList(cells)
        kind = classifier if classifier is not None else config.classifier
        self._build_classifier(kind, c_p, config.n_classes, config.etf_norm, seed)

    def features(self, x, train):
        s0 = s1 = self.stem(x, train)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, train)
        return F.global_avg_pool(s1)

    def forward(self, x, train):
        return self.head_logits(self.features(x, train), train)


def instantiate_genotype(genotype, config, classifier=None, seed=0, inherit_from=None, inherit_alpha=None):
    """Build the discrete network; optionally inherit parameters from a supernet.

    Inheritance matches each retained (node, source, op) to the same op in
    the supernet's mixed edge and copies tensors and buffers, so a network
    derived from a saturated alpha reproduces the supernet's output.
    """
    net = DiscreteNetwork(genotype, config, classifier=classifier, seed=seed)
    if inherit_from is None:
        return net
    sup = inherit_from
    _copy_module(net.stem, sup.stem)
    spec = config.cell_spec()
    edge_index = {pair: e for e, pair in enumerate(spec.edges())}
    name_index = {k: i for i, k in enumerate(config.catalog)}
    for dcell, scell in zip(net.cells, sup.cells):
        _copy_module(dcell.pre0, scell.pre0)
        _copy_module(dcell.pre1, scell.pre1)
        for j, (dst, src, op_name) in enumerate(dcell.wiring):
            e = edge_index[(src, dst)]
            _copy_module(dcell.ops[j], scell.edge_ops[e].ops[name_index[op_name]])
    if net.classifier_kind == sup.classifier_kind:
        _copy_module(net.classifier, sup.classifier)
    return net


def _copy_module(dst, src):
    dst_t = dict(dst.named_tensors())
    src_t = dict(src.named_tensors())
    if dst_t.keys() != src_t.keys():
        raise ShapeError(f"cannot copy params: {sorted(dst_t)} vs {sorted(src_t)}")
    for k, t in dst_t.items():
        t.data[...] = src_t[k].data
    src_b = dict(src.named_buffers())
    for k, b in dst.named_buffers():
        b[...] = src_b[k]
