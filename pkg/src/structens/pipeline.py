"""End-to-end experiment pipelines and report emission."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig, dump_config
from .continual import (MaskLedger, allocate_task, cl_accuracy, memory_account, task_accuracy,
                        train_naive, train_task)
from .data import DatasetHandle, load_training_directory, make_synthetic, split_tasks
from .errors import StageError
from .extraction import extract_subnetwork, plan_ensemble
from .metrics import (PredictionBatch, combine, diversity_score, ece, entropy_threshold,
                      filter_by_entropy, fgsm, gaussian_corrupt, overhead)
from .network import Network, architecture_from_text, build_network, init_scaling_sets
from .saliency import train_scaling
from .serialization import save_model
from .training import train_network

SYNTHETIC = ("spirals", "gaussians")


@dataclass
class ReportBundle:
    report: dict
    models: list[Network] = field(default_factory=list)
    ledger: MaskLedger | None = None
    output_dir: Path | None = None

    def to_json(self) -> str:
        return report_json(self.report)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, allow_nan=False) + "\n"


class _Stages:
    """Runs named stages; on failure the partial report is persisted before re-raising."""

    def __init__(self, report: dict, output_dir: Path | None):
        self.report = report
        self.output_dir = output_dir
        self.completed: list[str] = []

    def run(self, name: str, fn: Callable, *args, **kwargs):
        try:
            out = fn(*args, **kwargs)
        except Exception as exc:
            if self.output_dir is not None:
                self.output_dir.mkdir(parents=True, exist_ok=True)
                partial = {"failed_stage": name, "error": f"{type(exc).__name__}: {exc}",
                           "completed_stages": self.completed, "partial_report": self.report}
                (self.output_dir / "partial.json").write_text(json.dumps(partial, indent=2, default=str) + "\n")
            raise StageError(name, exc) from exc
        self.completed.append(name)
        return out


def load_dataset(cfg: ExperimentConfig) -> DatasetHandle:
    if cfg.dataset in SYNTHETIC:
        return make_synthetic(cfg.dataset, cfg.classes, cfg.samples, seed=cfg.seed, noise=cfg.noise,
                              separation=cfg.separation)
    return load_training_directory(cfg.dataset, seed=cfg.seed)


def _percent(v: float) -> float:
    return float(v * 100.0)


def _diversity(preds: PredictionBatch, subset: str) -> float | None:
    if preds.n_models < 2:
        return None
    try:
        return diversity_score(preds, subset)
    except ValueError:
        return None  # no correctly (or wrongly) classified sample


def _filter_row(key: str, value: float, preds: PredictionBatch, th: float) -> dict:
    res = filter_by_entropy(preds.entropy, preds.correct, th)
    return {key: value, "A": res.accuracy, "FA": res.filtered_accuracy, "D": res.discarded}


def evaluate_ensemble(members: Sequence[Network], ds: DatasetHandle, cfg: ExperimentConfig) -> dict:
    """Accuracy, calibration, diversity and entropy-filtered robustness of an ensemble."""
    preds = combine(members, ds.x_test, ds.y_test)
    dev = combine(members, ds.x_dev, ds.y_dev)
    dev_h = dev.entropy[dev.correct]
    th = entropy_threshold(dev_h if dev_h.size else dev.entropy)
    gaussian = [_filter_row("sigma", s, combine(members, gaussian_corrupt(ds.x_test, s, cfg.seed), ds.y_test), th)
                for s in cfg.noise_sigma]
    adversarial = [_filter_row("eps", e, combine(members, fgsm(members, ds.x_test, ds.y_test, e), ds.y_test), th)
                   for e in cfg.fgsm_eps]
    return {
        "accuracy": _percent(preds.correct.mean()),
        "ece": ece(preds, cfg.ece_bins),
        "cc_diversity": _diversity(preds, "correct"),
        "wc_diversity": _diversity(preds, "wrong"),
        "member_accuracy": [_percent(combine([m], ds.x_test, ds.y_test).correct.mean()) for m in members],
        "entropy_threshold": th,
        "gaussian": gaussian,
        "fgsm": adversarial,
    }


def _output_dir(cfg: ExperimentConfig, output_dir: str | Path | None) -> Path:
    return Path(cfg.output if output_dir is None else output_dir)


def run_ensemble_pipeline(cfg: ExperimentConfig, dataset: DatasetHandle | None = None,
                          output_dir: str | Path | None = None, persist: bool = True) -> ReportBundle:
    """Build, extract, train and evaluate an ensemble (``mode=single`` trains the full network alone)."""
    if cfg.mode not in ("ensemble", "single"):
        raise ValueError(f"ensemble pipeline runs modes 'ensemble' and 'single', got {cfg.mode!r}")
    single = cfg.mode == "single"
    out = _output_dir(cfg, output_dir) if persist else None
    report: dict = {"label": "single-model" if single or (cfg.members == 1 and cfg.prune == 0) else "structured-ensemble",
                    "config": cfg.to_dict()}
    stages = _Stages(report, out)

    ds = dataset if dataset is not None else stages.run("data", load_dataset, cfg)
    report["data"] = {"train": len(ds.x_train), "dev": len(ds.x_dev), "test": len(ds.x_test),
                      "classes": ds.n_classes}
    arch = stages.run("build", architecture_from_text, cfg.backbone, cfg.head, ds.input_shape, ds.n_classes)
    base = build_network(arch, cfg.seed)
    report["architecture"] = arch.to_dict()
    report["base_params"] = base.param_count()
    report["neurons"] = list(arch.neuron_counts)

    if single:
        members = [base.copy()]
        report["scaling_objective"] = []
        report["kept_neurons"] = [list(arch.neuron_counts)]
    else:
        sets = stages.run("init_scaling", init_scaling_sets, base, cfg.members, cfg.init, cfg.seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            history = stages.run("train_scaling", train_scaling, base, sets, ds.x_train, ds.y_train,
                                 cfg.mask_epochs, lr=cfg.mask_lr, lam=cfg.lam, batch_size=cfg.batch_size,
                                 momentum=cfg.momentum, seed=cfg.seed)
        report["scaling_objective"] = history
        blueprints = stages.run("extract", plan_ensemble, base, sets, cfg.prune, cfg.scope, ds.x_train, ds.y_train)
        members = [extract_subnetwork(base, bp) for bp in blueprints]
        report["kept_neurons"] = [[len(k) for k in bp.kept] for bp in blueprints]

    def train_all():
        return [train_network(m, ds.x_train, ds.y_train, ds.x_dev, ds.y_dev, cfg.epochs, lr=cfg.lr,
                              momentum=cfg.momentum, lr_decay=cfg.lr_decay, decay_every=cfg.decay_every,
                              patience=cfg.patience, batch_size=cfg.batch_size, seed=cfg.seed + 1000 * i)
                for i, m in enumerate(members)]

    histories = stages.run("train_members", train_all)
    report["member_params"] = [m.param_count() for m in members]
    report["overhead"] = overhead(members, base)
    report["best_epochs"] = [h.best_epoch for h in histories]
    report["dev_accuracy"] = [_percent(h.best_dev_accuracy) for h in histories]
    report["evaluation"] = stages.run("evaluate", evaluate_ensemble, members, ds, cfg)

    bundle = ReportBundle(report, members, None, out)
    if persist:
        stages.run("persist", _persist, bundle, cfg)
    return bundle


def run_cl_pipeline(cfg: ExperimentConfig, dataset: DatasetHandle | None = None,
                    output_dir: str | Path | None = None, persist: bool = True) -> ReportBundle:
    """Sequential task-incremental training with per-task masks (``cl``) or none at all (``naive``)."""
    if cfg.mode not in ("cl", "naive"):
        raise ValueError(f"continual pipeline runs modes 'cl' and 'naive', got {cfg.mode!r}")
    out = _output_dir(cfg, output_dir) if persist else None
    report: dict = {"label": "structured-ensemble-cl" if cfg.mode == "cl" else "naive", "config": cfg.to_dict()}
    stages = _Stages(report, out)

    ds = dataset if dataset is not None else stages.run("data", load_dataset, cfg)
    tasks = stages.run("split_tasks", split_tasks, ds, cfg.tasks)
    per_task = ds.n_classes // cfg.tasks
    arch = stages.run("build", architecture_from_text, cfg.backbone, cfg.head, ds.input_shape, per_task)
    net = build_network(arch, cfg.seed, n_heads=0)
    ledger = MaskLedger.for_network(net) if cfg.mode == "cl" else None
    m = cfg.tasks
    r = np.full((m, m), np.nan)
    for t, task in enumerate(tasks):
        seed = cfg.seed + t
        if ledger is not None:
            stages.run(f"allocate_task[{t}]", allocate_task, net, ledger, task.x_train, task.y_train,
                       p=cfg.prune, scope=cfg.scope, mode=cfg.extraction, epochs=cfg.mask_epochs,
                       lr=cfg.mask_lr, batch_size=cfg.batch_size, momentum=cfg.momentum, seed=seed, dist=cfg.init)
            stages.run(f"train_task[{t}]", train_task, net, ledger, t, task.x_train, task.y_train, cfg.epochs,
                       lr=cfg.lr, momentum=cfg.momentum, batch_size=cfg.batch_size, seed=seed)
        else:
            stages.run(f"train_task[{t}]", train_naive, net, t, task.x_train, task.y_train, cfg.epochs,
                       lr=cfg.lr, momentum=cfg.momentum, batch_size=cfg.batch_size, seed=seed)
        for j in range(t + 1):
            r[t, j] = task_accuracy(net, ledger, j, tasks[j].x_test, tasks[j].y_test)

    head_params = sum(p.size for p in net.head_tensors(0))
    base_params = sum(p.size for p in net.backbone_tensors()) + head_params
    account = memory_account(ledger if ledger is not None else arch.neuron_counts, base_params, m, head_params)
    report["tasks"] = [list(t.classes) for t in tasks]
    report["R"] = [[None if np.isnan(v) else float(v) for v in row] for row in r]
    report["cl_accuracy"] = cl_accuracy(r)
    report["forgetting"] = [float(r[j, j] - r[m - 1, j]) for j in range(m)]
    report["memory"] = {"base_params": base_params, "floats": account.floats,
                        "binaries": account.binaries if ledger is not None else 0,
                        "neurons": list(arch.neuron_counts)}
    report["mask_density"] = ledger.densities() if ledger is not None else None

    bundle = ReportBundle(report, [net], ledger, out)
    if persist:
        stages.run("persist", _persist, bundle, cfg)
    return bundle


def run_pipeline(cfg: ExperimentConfig, **kwargs) -> ReportBundle:
    if cfg.mode in ("cl", "naive"):
        return run_cl_pipeline(cfg, **kwargs)
    return run_ensemble_pipeline(cfg, **kwargs)


def _persist(bundle: ReportBundle, cfg: ExperimentConfig) -> None:
    out = bundle.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(bundle.to_json())
    (out / "config.ini").write_text(dump_config(cfg))
    save_model(out / "model.bin", bundle.models, bundle.ledger)


# -- flat tables ----------------------------------------------------------------------

def flatten_report(report: dict) -> dict:
    """One CSV row of headline numbers from a report."""
    cfg = report.get("config", {})
    row = {"label": report.get("label"), "mode": cfg.get("mode"), "seed": cfg.get("seed"),
           "members": cfg.get("members"), "prune": cfg.get("prune"), "scope": cfg.get("scope")}
    if "evaluation" in report:
        ev = report["evaluation"]
        row.update(accuracy=ev["accuracy"], ece=ev["ece"], cc_diversity=ev["cc_diversity"],
                   wc_diversity=ev["wc_diversity"], overhead=report["overhead"])
    if "cl_accuracy" in report:
        row.update(cl_accuracy=report["cl_accuracy"], binaries=report["memory"]["binaries"],
                   floats=report["memory"]["floats"])
    return row


def write_rows(path: str | Path, rows: Sequence[dict]) -> None:
    columns = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else row[k] for k in columns})


def sweep(cfg: ExperimentConfig, param: str, values: Sequence, output_dir: str | Path | None = None,
          dataset: DatasetHandle | None = None) -> list[dict]:
    """Rerun the configured pipeline once per value of ``param``; each point gets its own directory."""
    if param not in cfg.to_dict():
        raise ValueError(f"unknown sweep parameter {param!r}")
    out = Path(cfg.output if output_dir is None else output_dir)
    if dataset is None and cfg.dataset in SYNTHETIC:
        dataset = load_dataset(cfg)
    rows = []
    for value in values:
        point = cfg.with_overrides(**{param: value})
        bundle = run_pipeline(point, dataset=dataset, output_dir=out / f"{param}={value}")
        rows.append({param: value, **flatten_report(bundle.report)})
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "sweep.csv", rows)
    return rows


def collect_reports(directory: str | Path) -> list[tuple[Path, dict]]:
    directory = Path(directory)
    return [(p.parent, json.loads(p.read_text())) for p in sorted(directory.rglob("report.json"))]
