"""``npt`` command line: train, synth, probe, gradcheck.

Exit codes: 0 success, 1 a check failed, 2 usage / config / data error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, gradchecks
from .attention import ConfigError
from .data import (CONTEXT, DUPLICATION_VARIANTS, TEST, VAL, DataTable, load_csv, make_duplication_task,
                   save_csv, split_rows, synthetic_regression_table)
from .embedding import DataError
from .masking import build_task_masks
from .model import CheckpointFormatError, RunConfig, load_checkpoint, save_checkpoint
from .tensor import DeterministicRng
from .train import build_model, evaluate, fit, jsonl_logger, mask_config

USAGE_ERRORS = (ConfigError, DataError, CheckpointFormatError, FileNotFoundError, KeyError, json.JSONDecodeError)


class UsageError(Exception):
    pass


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = json.loads(path.read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(raw)


def _with_roles(table: DataTable, config: RunConfig) -> DataTable:
    if table.schema.role_column:
        return table
    return table.with_roles(split_rows(table.n, config.split, config.seed))


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    table = _with_roles(load_csv(args.data, args.schema), config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(table, config)
    log = jsonl_logger(out / "metrics.jsonl")
    try:
        fit(model, table, log=log)
    finally:
        log.close()
    save_checkpoint(model, out / "checkpoint.nptc")
    report = {"steps": model.step, "config": config.to_dict()}
    for name, role in (("val", VAL), ("test", TEST)):
        if np.any(table.roles == role):
            ev = evaluate(model, table, score_roles=(role,))
            report[name] = {k: v for k, v in ev.items() if k != "predictions"}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"trained {model.step} steps; checkpoint at {out / 'checkpoint.nptc'}")
    return 0


def cmd_synth(args) -> int:
    if args.n < 2:
        raise ConfigError("--n must be at least 2")
    rng = DeterministicRng(args.seed, 0)
    base = synthetic_regression_table(args.n, args.features, rng.child(0))
    base = base.with_roles(split_rows(args.n, (0.7, 0.2, 0.1), args.seed))
    table = make_duplication_task(base, args.variant, rng.child(1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(table, out / "data.csv", out / "schema.json")
    print(f"wrote {table.n} rows to {out / 'data.csv'}")
    return 0


def _check_compatible(model, table: DataTable) -> None:
    if table.schema.names != model.schema.names:
        raise UsageError(f"data columns {table.schema.names} do not match the checkpoint's {model.schema.names}")
    if [c.kind for c in table.schema.columns] != [c.kind for c in model.schema.columns]:
        raise UsageError("data column kinds do not match the checkpoint schema")


def cmd_probe(args) -> int:
    model, config = load_checkpoint(args.checkpoint)
    table = _with_roles(load_csv(args.data, args.schema), config)
    _check_compatible(model, table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scored = np.any(table.roles == TEST)
    if args.mode in ("corrupt", "delete") and not scored:
        raise UsageError(f"--mode {args.mode} needs test rows in the data")
    report = analysis.ProbeReport()
    if args.mode == "corrupt":
        res = analysis.corruption_eval(model, table, max_rows=args.max_rows)
        report.corruption = analysis.corruption_report(res)
        print(f"{res.metric}: clean {res.clean_metric:.4g} corrupted {res.corrupted_metric:.4g} "
              f"delta {res.delta:+.4g}")
    elif args.mode == "delete":
        report = analysis.deletion_probe(model, table, max_points=args.max_rows)
        print(f"kept vs random: {report.kept_vs_random}")
    elif args.mode == "equivariance":
        rng = DeterministicRng(args.seed, 9)
        x_in, mask = build_task_masks(table, mask_config(config), rng, model.stats, training=False)
        rows = np.arange(min(table.n, args.max_rows or table.n))
        report.equivariance = analysis.equivariance_check(model, x_in[rows], mask.bits[rows], 20, rng)
        print(f"max deviation {report.equivariance:.3g}")
    else:
        maps = analysis.attention_maps(model, table)
        labels = {"attribute": model.schema.names}
        paths = maps.to_csv(out, labels)
        print(f"wrote {len(paths)} attention maps to {out}")
        return 0
    report.save(out / f"probe_{args.mode}.json")
    return 0


def cmd_gradcheck(args) -> int:
    config = load_config(args.config) if args.config else None
    if config is not None:
        config = replace(config, dtype="float64", dropout=0.0)
    errors = gradchecks.run_all(config, fault=args.inject_fault)
    width = max(len(k) for k in errors)
    failed = 0
    for name, err in errors.items():
        ok = err < gradchecks.TOLERANCE
        failed += not ok
        print(f"{name:<{width}}  {err:.3e}  {'ok' if ok else 'FAIL'}")
    report = {"tolerance": gradchecks.TOLERANCE, "max_error": errors, "passed": failed == 0}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"{len(errors) - failed}/{len(errors)} checks passed")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="npt", description="Non-parametric transformer experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a CSV table")
    p.add_argument("--config", help="JSON file with RunConfig keys")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("synth", help="write a synthetic duplication task")
    p.add_argument("--variant", choices=DUPLICATION_VARIANTS, default="plain")
    p.add_argument("--n", type=int, default=512, help="number of original rows")
    p.add_argument("--features", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("probe", help="run an interaction probe on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--mode", choices=("corrupt", "delete", "equivariance", "attention"), required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-rows", type=int, default=None, help="cap on evaluated rows")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the loss")
    p.add_argument("--config", help="JSON RunConfig for the loss checks (forced to float64)")
    p.add_argument("--out", help="write a JSON report here")
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"npt {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
