"""Command-line entry point."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ALIASES, ExperimentConfig, load_config
from .continual import task_logits
from .data import load_directory
from .errors import ConfigError, FormatError, StageError
from .metrics import PredictionBatch, combine, ece
from .pipeline import (collect_reports, flatten_report, report_json, run_cl_pipeline,
                       run_ensemble_pipeline, sweep, write_rows)
from .serialization import load_model


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "output", None):
        cfg = cfg.with_overrides(output=args.output)
    return cfg


def _print_report(report: dict) -> None:
    sys.stdout.write(report_json(report))


def cmd_train_ensemble(args) -> int:
    cfg = _config(args)
    if cfg.mode not in ("ensemble", "single"):
        raise ConfigError(f"train-ensemble needs mode 'ensemble' or 'single', config has {cfg.mode!r}")
    bundle = run_ensemble_pipeline(cfg)
    _print_report(bundle.report)
    return 0


def cmd_cl_run(args) -> int:
    cfg = _config(args)
    if cfg.mode not in ("cl", "naive"):
        raise ConfigError(f"cl-run needs mode 'cl' or 'naive', config has {cfg.mode!r}")
    bundle = run_cl_pipeline(cfg)
    _print_report(bundle.report)
    return 0


def cmd_eval(args) -> int:
    networks, ledger = load_model(args.model)
    x, y = load_directory(args.data)
    x = x.reshape((len(x),) + networks[0].arch.input_shape)
    if ledger is None:
        preds = combine(networks, x, y)
        result = {"models": len(networks), "samples": len(y), "accuracy": float(preds.correct.mean() * 100.0),
                  "ece": ece(preds)}
    else:
        net = networks[0]
        per = net.n_classes
        accs = []
        for t in range(ledger.n_tasks):
            keep = (y >= t * per) & (y < (t + 1) * per)
            if keep.any():
                preds = PredictionBatch(task_logits(net, ledger, t, x[keep]), y[keep] - t * per)
                accs.append(float(preds.correct.mean() * 100.0))
            else:
                accs.append(None)
        result = {"tasks": ledger.n_tasks, "samples": len(y), "task_accuracy": accs}
    sys.stdout.write(json.dumps(result, indent=2) + "\n")
    return 0


def _typed(cfg: ExperimentConfig, param: str, raw: str):
    current = getattr(cfg, param)
    if isinstance(current, bool) or not isinstance(current, (int, float)):
        return raw
    return type(current)(float(raw)) if isinstance(current, float) else int(raw)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    param = ALIASES.get(args.param.lower(), args.param)
    if not hasattr(cfg, param):
        raise ConfigError(f"unknown sweep parameter {args.param!r}")
    values = [_typed(cfg, param, v) for v in args.values.split(",") if v.strip()]
    rows = sweep(cfg, param, values)
    for row in rows:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_report(args) -> int:
    found = collect_reports(args.dir)
    if not found:
        print(f"no report.json under {args.dir}", file=sys.stderr)
        return 1
    rows = [{"run": str(path.relative_to(args.dir)), **flatten_report(rep)} for path, rep in found]
    write_rows(Path(args.dir) / "summary.csv", rows)
    for row in rows:
        print(", ".join(f"{k}={v}" for k, v in row.items() if v is not None))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structens", description="Structured sub-network ensembles and mask-based continual learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ensemble", help="extract, train and evaluate an ensemble")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="override the configured output directory")
    p.set_defaults(func=cmd_train_ensemble)

    p = sub.add_parser("cl-run", help="run a task-incremental continual-learning experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_cl_run)

    p = sub.add_parser("eval", help="evaluate a saved model on a data directory")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="rerun a configuration over values of one parameter")
    p.add_argument("--config")
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 30,50,70,80")
    p.add_argument("--output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="tabulate every report.json under a directory")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
