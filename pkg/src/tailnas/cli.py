"""Command-line entry points.

Subcommands: search, train, eval, explore, ablate, opcompare, collapse,
etfcheck, gradcheck. Outputs are deterministic per (config, seed);
timestamps appear only in the run.log sidecar. Existing primary outputs
are never overwritten without --force. TAILNAS_OUT sets the default
output root.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from tailnas import data, etf, search, supernet as sn, suites, train_eval
from tailnas.config import ExperimentConfig
from tailnas.errors import TailnasError
from tailnas.util import to_jsonable

log = logging.getLogger("tailnas")


def _out_dir(args, name):
    root = args.out or os.environ.get("TAILNAS_OUT", ".")
    path = Path(root) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _guard_outputs(out, names, force):
    existing = [n for n in names if (out / n).exists()]
    if existing and not force:
        raise TailnasError(
            f"outputs already exist in {out}: {existing}; pass --force to overwrite"
        )


def _attach_log(out):
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def _load_config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["data.seed"] = args.seed
    if getattr(args, "classifier", None):
        overrides["search.classifier"] = args.classifier
    return ExperimentConfig.load(args.config, overrides=overrides)


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(to_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo_config(out, cfg):
    _write_json(out / "resolved_config.json", cfg.resolved())


def cmd_search(args):
    cfg = _load_config(args)
    out = _out_dir(args, "search")
    _guard_outputs(out, ["genotype.json", "trace.csv", "summary.json"], args.force)
    handler = _attach_log(out)
    try:
        seed = cfg["data"]["seed"]
        log.info("search starting: seed=%d classifier=%s", seed, cfg["search"]["classifier"])
        cell = suites.run_search_cell(cfg, seed)
        with open(out / "genotype.json", "w") as fh:
            fh.write(sn.genotype_to_json(cell.genotype))
        cell.trace.to_csv(out / "trace.csv")
        if args.dump_alpha:
            np.savez(out / "alpha.npz", alpha=cell.alpha_vector)
        last = cell.trace.records[-1]
        summary = {
            "config": cfg.resolved(),
            "config_hash": cfg.hash(),
            "seed": seed,
            "epochs": len(cell.trace.records),
            "final_train_loss": last.train_loss,
            "final_val_loss": last.val_loss,
            "final_balanced_acc": last.balanced_acc,
            "lambda_max": cell.trace.final_lambda_max(),
            "skip_fraction": sn.skip_fraction(cell.genotype),
            "classifier": cfg["search"]["classifier"],
        }
        _write_json(out / "summary.json", summary)
        _echo_config(out, cfg)
        log.info("search done: balanced_acc=%.4f", last.balanced_acc)
    finally:
        logging.getLogger().removeHandler(handler)
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    out = _out_dir(args, "train")
    _guard_outputs(out, ["curve.csv", "eval.json", "weights.npz"], args.force)
    handler = _attach_log(out)
    try:
        genotype = sn.genotype_from_json(Path(args.genotype).read_text())
        spec = cfg.data_spec()
        train, test = data.synthesize(spec)
        counts = data.class_counts(spec)
        tcfg = cfg.train_config(counts)
        net_cfg = cfg.supernet_config(classifier=tcfg.classifier)
        net, curve, crt_result = train_eval.train_from_scratch(genotype, net_cfg, tcfg, train, test)
        report = train_eval.evaluate(net, test, counts, seed=tcfg.seed, cfg_hash=cfg.hash())
        with open(out / "curve.csv", "w") as fh:
            fh.write("epoch,train_loss,balanced_acc\n")
            for row in curve:
                fh.write(f"{row['epoch']},{row['train_loss']!r},{row['balanced_acc']!r}\n")
        with open(out / "eval.json", "w") as fh:
            fh.write(report.to_json())
        np.savez(out / "weights.npz", **{k: v for k, v in net.state_arrays().items()})
        if crt_result is not None:
            _write_json(out / "crt.json", vars(crt_result))
        _echo_config(out, cfg)
        log.info("train done: overall=%.4f params=%d", report.overall, report.param_count)
    finally:
        logging.getLogger().removeHandler(handler)
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    out = _out_dir(args, "eval")
    _guard_outputs(out, ["eval.json"], args.force)
    genotype = sn.genotype_from_json(Path(args.genotype).read_text())
    spec = cfg.data_spec()
    _, test = data.synthesize(spec)
    counts = data.class_counts(spec)
    net_cfg = cfg.supernet_config(classifier=cfg["train"]["classifier"])
    net = sn.DiscreteNetwork(genotype, net_cfg, classifier=cfg["train"]["classifier"],
                             seed=cfg["data"]["seed"])
    arrays = dict(np.load(args.weights))
    net.load_state_arrays(arrays)
    report = train_eval.evaluate(net, test, counts, seed=cfg["data"]["seed"], cfg_hash=cfg.hash())
    with open(out / "eval.json", "w") as fh:
        fh.write(report.to_json())
    _echo_config(out, cfg)
    return 0


def _emit_suite(args, result, out_name, csv_name):
    out = _out_dir(args, out_name)
    _guard_outputs(out, [csv_name, out_name + ".json"], args.force)
    handler = _attach_log(out)
    try:
        result.to_csv(out / csv_name)
        _write_json(out / (out_name + ".json"), {"rows": result.rows, "summary": result.summary})
    finally:
        logging.getLogger().removeHandler(handler)
    return out


def cmd_explore(args):
    cfg = _load_config(args)
    result = suites.run_explore(cfg, args.axis)
    out = _emit_suite(args, result, f"explore_{args.axis}", "rows.csv")
    _echo_config(out, cfg)
    return 0


def cmd_ablate(args):
    cfg = _load_config(args)
    result = suites.run_ablate(cfg)
    out = _emit_suite(args, result, "ablate", "rows.csv")
    _echo_config(out, cfg)
    return 0


def cmd_opcompare(args):
    cfg = _load_config(args)
    result = suites.run_opcompare(cfg)
    out = _emit_suite(args, result, "opcompare", "rows.csv")
    _echo_config(out, cfg)
    return 0


def cmd_collapse(args):
    cfg = _load_config(args)
    rows, cells = suites.run_collapse(cfg)
    out = _emit_suite(args, rows, "collapse", "rows.csv")
    for (arm, seed), (cell, curve) in cells.items():
        cell.trace.to_csv(out / f"trace_{arm}_seed{seed}.csv")
        with open(out / f"curve_{arm}_seed{seed}.csv", "w") as fh:
            fh.write("epoch,train_loss,balanced_acc\n")
            for row in curve:
                fh.write(f"{row['epoch']},{row['train_loss']!r},{row['balanced_acc']!r}\n")
    _echo_config(out, cfg)
    return 0


def cmd_etfcheck(args):
    out = _out_dir(args, "etfcheck")
    _guard_outputs(out, ["etf_report.json"], args.force)
    weights = etf.build_etf(args.dim, args.classes, args.norm, args.seed or 0)
    report = etf.verify_etf(weights, tol=args.tol)
    _write_json(out / "etf_report.json", report)
    print(json.dumps(to_jsonable(report), indent=2))
    return 0 if report["pass"] else 1


def cmd_gradcheck(args):
    from tailnas.gradcheck_suite import run_gradcheck_suite

    out = _out_dir(args, "gradcheck")
    _guard_outputs(out, ["gradcheck.json"], args.force)
    results = run_gradcheck_suite(seeds=(0, 1, 2), tol=args.tol)
    _write_json(out / "gradcheck.json", results)
    worst = max(r["max_rel_error"] for r in results["checks"])
    for r in results["checks"]:
        status = "ok" if r["passed"] else "FAIL"
        print(f"{status:4s} {r['name']:<40s} {r['max_rel_error']:.3e}")
    print(f"worst: {worst:.3e}  tol: {args.tol:g}")
    return 0 if results["all_passed"] else 1


def build_parser():
    p = argparse.ArgumentParser(prog="tailnas",
                                description="Differentiable architecture search for long-tailed data")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", default=None, help="INI config file")
        sp.add_argument("--out", default=None, help="output root (default $TAILNAS_OUT or .)")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("search", help="bilevel architecture search")
    common(sp)
    sp.add_argument("--classifier", choices=["trainable", "etf"], default=None)
    sp.add_argument("--dump-alpha", action="store_true", help="save final alpha vector")
    sp.set_defaults(fn=cmd_search)

    sp = sub.add_parser("train", help="train a genotype from scratch")
    common(sp)
    sp.add_argument("--genotype", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate saved weights of a genotype")
    common(sp)
    sp.add_argument("--genotype", required=True)
    sp.add_argument("--weights", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("explore", help="single-axis component exploration")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(suites.EXPLORE_AXES))
    sp.set_defaults(fn=cmd_explore)

    sp = sub.add_parser("ablate", help="vanilla / +conv / +conv+etf ablation")
    common(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("opcompare", help="fixed-backbone operation comparison")
    common(sp)
    sp.set_defaults(fn=cmd_opcompare)

    sp = sub.add_parser("collapse", help="paired trainable-vs-ETF collapse study")
    common(sp)
    sp.set_defaults(fn=cmd_collapse)

    sp = sub.add_parser("etfcheck", help="build and verify an ETF classifier")
    common(sp)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--dim", type=int, default=64)
    sp.add_argument("--norm", type=float, default=1.0)
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.set_defaults(fn=cmd_etfcheck)

    sp = sub.add_parser("gradcheck", help="finite-difference check of all primitives and ops")
    common(sp, seed=False)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TailnasError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
