"""Experiment configuration: one INI-style file, strictly parsed.

Every key has a default, so commands run without a config file; unknown
sections or keys are errors. The resolved config (defaults + file +
command-line overrides) is echoed into every output and hashed for
provenance.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace

from tailnas import catalog, data, rebalance, search, supernet as sn, train_eval
from tailnas.errors import ConfigError
from tailnas.util import config_hash

_SCHEMA = {
    "data": {
        "classes": (int, 10),
        "n_max": (int, 100),
        "rho": (float, 100.0),
        "image": (str, "3x16x16"),
        "seed": (int, 0),
        "test_per_class": (int, 20),
        "noise": (float, 1.0),
    },
    "supernet": {
        "cells": (int, 5),
        "init_channels": (int, 8),
        "nodes": (int, 4),
        "multiplier": (int, 4),
        "stem_multiplier": (int, 3),
        "catalog": (str, "full"),  # full | vanilla | comma-separated op names
    },
    "search": {
        "epochs": (int, 12),
        "batch_size": (int, 16),
        "w_lr": (float, 0.025),
        "w_momentum": (float, 0.9),
        "w_weight_decay": (float, 3e-4),
        "alpha_lr": (float, 3e-4),
        "alpha_weight_decay": (float, 1e-3),
        "order": (str, "first"),
        "classifier": (str, "trainable"),
        "loss": (str, "ce"),  # ce | ldam | ldam-drw
        "probe_every": (str, "final"),  # never | final | integer period
        "probe_iters": (int, 20),
        "probe_tol": (float, 1e-4),
        "probe_batch_cap": (int, 128),
        "grad_clip": (float, 5.0),
        "split_fraction": (float, 0.5),
    },
    "train": {
        "epochs": (int, 0),  # 0: default to 4x search epochs
        "batch_size": (int, 16),
        "lr": (float, 0.05),
        "momentum": (float, 0.9),
        "weight_decay": (float, 3e-4),
        "loss": (str, "ce"),
        "mixup": (bool, False),
        "mixup_beta": (float, 1.0),
        "crt": (bool, False),
        "crt_epochs": (int, 0),  # 0: 20% of train epochs
        "classifier": (str, "trainable"),
    },
    "suite": {
        "seeds": (str, "0,1,2"),
        "rho_list": (str, "1,100"),
    },
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _convert(section, key, kind, raw):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {kind.__name__}") from e


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # section -> key -> typed value

    def __getitem__(self, section):
        return self.values[section]

    def resolved(self):
        return {s: dict(kv) for s, kv in self.values.items()}

    def hash(self):
        return config_hash(self.resolved())

    @classmethod
    def defaults(cls):
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in _SCHEMA.items()})

    @classmethod
    def load(cls, path=None, overrides=None):
        """Parse an INI file over the defaults; `overrides` maps 'section.key' to raw strings."""
        values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in _SCHEMA.items()}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            read = parser.read(path)
            if not read:
                raise ConfigError(f"config file not found: {path}")
            for section in parser.sections():
                if section not in _SCHEMA:
                    raise ConfigError(f"unknown section [{section}] (known: {sorted(_SCHEMA)})")
                for key, raw in parser.items(section):
                    if key not in _SCHEMA[section]:
                        raise ConfigError(
                            f"unknown key {key!r} in [{section}] (known: {sorted(_SCHEMA[section])})"
                        )
                    values[section][key] = _convert(section, key, _SCHEMA[section][key][0], raw)
        for dotted, raw in (overrides or {}).items():
            section, _, key = dotted.partition(".")
            if section not in _SCHEMA or key not in _SCHEMA[section]:
                raise ConfigError(f"unknown override {dotted!r}")
            kind = _SCHEMA[section][key][0]
            values[section][key] = raw if isinstance(raw, kind) else _convert(section, key, kind, str(raw))
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self):
        d = self.values["data"]
        parts = d["image"].split("x")
        if len(parts) != 3 or not all(p.isdigit() for p in parts):
            raise ConfigError(f"[data] image must look like CxHxW, got {d['image']!r}")
        s = self.values["search"]
        if s["order"] not in ("first", "second"):
            raise ConfigError(f"[search] order must be first|second, got {s['order']!r}")
        for sec in ("search", "train"):
            if self.values[sec]["classifier"] not in ("trainable", "etf"):
                raise ConfigError(f"[{sec}] classifier must be trainable|etf")
            if self.values[sec]["loss"] not in ("ce", "ldam", "ldam-drw"):
                raise ConfigError(f"[{sec}] loss must be ce|ldam|ldam-drw")
        p = s["probe_every"]
        if p not in ("never", "final") and not p.isdigit():
            raise ConfigError(f"[search] probe_every must be never|final|<int>, got {p!r}")
        self.catalog_names()

    # ------------------------------------------------------------------
    # materialization
    # ------------------------------------------------------------------

    def data_spec(self, rho=None, seed=None):
        d = self.values["data"]
        c, h, w = (int(p) for p in d["image"].split("x"))
        return data.LongTailSpec(
            n_classes=d["classes"],
            n_max=d["n_max"],
            rho=d["rho"] if rho is None else float(rho),
            image_size=(c, h, w),
            seed=d["seed"] if seed is None else int(seed),
            test_per_class=d["test_per_class"],
            noise=d["noise"],
        )

    def catalog_names(self):
        raw = self.values["supernet"]["catalog"]
        if raw == "full":
            return catalog.CATALOG_ORDER
        if raw == "vanilla":
            return catalog.VANILLA_CATALOG
        names = tuple(n.strip() for n in raw.split(",") if n.strip())
        bad = [n for n in names if n not in catalog.CATALOG_ORDER]
        if bad:
            raise ConfigError(f"[supernet] catalog: unknown ops {bad}")
        return names

    def supernet_config(self, classifier=None, n_classes=None):
        s = self.values["supernet"]
        c, _, _ = (int(p) for p in self.values["data"]["image"].split("x"))
        return sn.SupernetConfig(
            n_cells=s["cells"],
            init_channels=s["init_channels"],
            n_nodes=s["nodes"],
            multiplier=s["multiplier"],
            stem_multiplier=s["stem_multiplier"],
            n_classes=self.values["data"]["classes"] if n_classes is None else n_classes,
            image_channels=c,
            classifier=classifier or self.values["search"]["classifier"],
            catalog=self.catalog_names(),
        )

    def _loss_spec(self, name, counts):
        if name == "ce":
            return rebalance.LossSpec(kind="ce")
        drw = rebalance.DrwSpec() if name == "ldam-drw" else None
        return rebalance.LossSpec(kind="ldam", class_counts=tuple(int(v) for v in counts), drw=drw)

    def search_config(self, counts, seed=None, classifier=None):
        s = self.values["search"]
        if s["probe_every"] == "never":
            probe_every = None
        elif s["probe_every"] == "final":
            probe_every = s["epochs"]
        else:
            probe_every = int(s["probe_every"])
        return search.SearchConfig(
            epochs=s["epochs"],
            batch_size=s["batch_size"],
            w_opt=search.WOptSpec(lr=s["w_lr"], momentum=s["w_momentum"], weight_decay=s["w_weight_decay"]),
            alpha_opt=search.AlphaOptSpec(lr=s["alpha_lr"], weight_decay=s["alpha_weight_decay"]),
            order=s["order"],
            classifier=classifier or s["classifier"],
            loss=self._loss_spec(s["loss"], counts),
            probe=search.HessianProbe(power_iters=s["probe_iters"], tol=s["probe_tol"],
                                      batch_cap=s["probe_batch_cap"]),
            probe_every=probe_every,
            grad_clip=s["grad_clip"],
            seed=self.values["data"]["seed"] if seed is None else int(seed),
        )

    def train_config(self, counts, seed=None, classifier=None):
        t = self.values["train"]
        epochs = t["epochs"] or 4 * self.values["search"]["epochs"]
        crt = None
        if t["crt"]:
            crt = rebalance.CrtSpec(epochs=t["crt_epochs"] or max(1, epochs // 5))
        return train_eval.TrainConfig(
            epochs=epochs,
            batch_size=t["batch_size"],
            opt=search.WOptSpec(lr=t["lr"], momentum=t["momentum"], weight_decay=t["weight_decay"]),
            loss=self._loss_spec(t["loss"], counts),
            mixup=rebalance.MixupSpec(beta_param=t["mixup_beta"], enabled=t["mixup"]),
            crt=crt,
            classifier=classifier or t["classifier"],
            seed=self.values["data"]["seed"] if seed is None else int(seed),
        )

    def suite_seeds(self):
        return [int(v) for v in self.values["suite"]["seeds"].split(",") if v.strip()]

    def suite_rhos(self):
        return [float(v) for v in self.values["suite"]["rho_list"].split(",") if v.strip()]
