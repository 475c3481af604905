"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the summary block at
the end of any pytest run lists every criterion that was exercised.
"""
import json
import math
import time
import warnings

import numpy as np
import pytest

from structens import autograd as ag
from structens.autograd import Tensor
from structens.config import ExperimentConfig
from structens.continual import (MaskLedger, allocate_task, cl_accuracy, memory_account, task_logits,
                                 train_task)
from structens.data import make_synthetic, split_tasks
from structens.diversity import mmd2
from structens.extraction import extract_subnetwork, plan_ensemble
from structens.metrics import (PredictionBatch, combine, ece, entropy_threshold, filter_by_entropy,
                              gaussian_corrupt, input_gradient, overhead, predict_logits, softmax)
from structens.network import (Architecture, Conv2d, Flatten, Linear, MaxPool2d, ReLU, architecture_from_text,
                               build_network, init_scaling_sets, lenet5, mlp, vgg11_half)
from structens.pipeline import run_cl_pipeline, run_ensemble_pipeline
from structens.saliency import scaling_objective, train_scaling

from conftest import numeric_grad, random_architecture, random_blueprint, record, zeroed_copy

# desk-scale ensemble benchmark: 10-arm spirals, 2-128-128-10 MLP
DESK = dict(dataset="spirals", classes=10, samples=4000, noise=0.1, backbone="mlp-128-128", members=5,
            prune=50.0, scope="per_layer", lam=0.1, mask_epochs=10, epochs=300, lr=0.05, patience=60,
            fgsm_eps=(0.05,), noise_sigma=(0.0, 0.3))
DESK_SEEDS = (0, 1, 2)
# desk-scale continual benchmark: 3 tasks of 2 spiral arms each
CL_DESK = dict(dataset="spirals", classes=6, tasks=3, samples=3000, backbone="mlp-64-64", epochs=200, lr=0.05)


def relative_error(analytic, numeric, floor=1e-8):
    """Largest |a - n| / max(|a|, |n|), with tiny components compared absolutely against ``floor``."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max())


@pytest.fixture(scope="module")
def desk_runs():
    runs = []
    start = time.perf_counter()
    for seed in DESK_SEEDS:
        cfg = ExperimentConfig(seed=seed, **DESK)
        ens = run_ensemble_pipeline(cfg, persist=False)
        single = run_ensemble_pipeline(cfg.with_overrides(mode="single"), persist=False).report
        runs.append((seed, ens, single))
    return runs, time.perf_counter() - start


def test_criterion_01_extraction_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, conv_chains = 0.0, 0
    for trial in range(50):
        arch = random_architecture(rng)
        if trial < 25 and not any(isinstance(layer, Conv2d) for layer in arch.backbone):
            # force a conv -> flatten -> linear chain for the first half
            while not any(isinstance(layer, Conv2d) for layer in arch.backbone):
                arch = random_architecture(rng)
        conv_chains += any(isinstance(layer, Flatten) for layer in arch.backbone)
        net = build_network(arch, seed=trial)
        bp = random_blueprint(arch, rng)
        x = rng.uniform(-1, 1, size=(4, *arch.input_shape))
        diff = np.abs(extract_subnetwork(net, bp)(x).data - zeroed_copy(net, bp.kept)(x).data).max()
        worst = max(worst, float(diff))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and conv_chains >= 25 and elapsed < 60
    record(1, ok, f"50 triples ({conv_chains} conv->flatten->linear), max |diff| {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_gradient_correctness():
    start = time.perf_counter()
    errors = {"scaling": 0.0, "weights": 0.0, "input": 0.0}
    for seed in range(4):
        rng = np.random.default_rng(seed)
        arch = Architecture((2, 6, 6), (Conv2d(2, 3, 3, padding=1), ReLU(), MaxPool2d(2), Flatten(),
                                        Linear(27, 5), ReLU()), (Linear(5, 3),))
        net = build_network(arch, seed)
        x, y = rng.uniform(size=(7, 2, 6, 6)), rng.integers(0, 3, 7)

        sets = init_scaling_sets(net, 3, seed=seed)
        net.set_requires_grad(False)
        scaling_objective(net, sets, x, y, lam=0.1).backward()
        net.set_requires_grad(True)
        for s in sets:
            for v in s.vectors:
                numeric = numeric_grad(lambda: scaling_objective(net, sets, x, y, lam=0.1).item(), v.data)
                errors["scaling"] = max(errors["scaling"], relative_error(v.grad, numeric))

        dense = build_network(mlp(4, [6, 5], 3), seed)
        xd, yd = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
        for model, inputs, labels in ((net, x, y), (dense, xd, yd)):
            for t in model.parameters():
                t.zero_grad()
            ag.cross_entropy(model(inputs), labels).backward()
            for t in model.parameters():
                numeric = numeric_grad(lambda: ag.cross_entropy(model(inputs), labels).item(), t.data)
                errors["weights"] = max(errors["weights"], relative_error(t.grad, numeric))

        members = [build_network(arch, seed + k) for k in range(3)]
        xi = x.copy()

        def ensemble_loss():
            probs = np.mean([softmax(predict_logits(m, xi)) for m in members], axis=0)
            return float(-np.log(probs[np.arange(len(y)), y]).mean())

        analytic = input_gradient(members, xi, y)
        # input gradients are ~1e-7 per pixel against a loss of ~1, so a wider step keeps FD roundoff below 1e-5
        numeric = numeric_grad(ensemble_loss, xi, h=1e-4)
        errors["input"] = max(errors["input"], relative_error(analytic, numeric))
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) <= 1e-5 and elapsed < 60
    record(2, ok, ", ".join(f"{k} rel err {v:.1e}" for k, v in errors.items()) + f", {elapsed:.1f}s")
    assert ok


def test_criterion_03_mmd_oracle():
    value = mmd2([1.0, 1.0], [0.0, 0.0]).item()
    expected = 2 - 2 * math.exp(-0.5)
    rng = np.random.default_rng(3)
    symmetric = all(mmd2(u, v).item() == mmd2(v, u).item()
                    for u, v in (rng.normal(size=(2, n)) for n in (2, 5, 17, 64)))
    zero = mmd2([0.7, 0.7, 0.7], [0.7, 0.7, 0.7]).item() == 0.0 and mmd2([0.0, 0.0], [0.0, 0.0]).item() == 0.0
    ok = abs(value - expected) <= 1e-9 and symmetric and zero
    record(3, ok, f"mmd2([1,1],[0,0]) = {value:.9f} (oracle {expected:.9f}), symmetric {symmetric}, zero {zero}")
    assert ok


def test_criterion_04_zero_forgetting():
    start = time.perf_counter()
    tasks = split_tasks(make_synthetic("spirals", 6, 1500, seed=0), 3)
    net = build_network(mlp(2, [64, 64], 2), seed=0, n_heads=0)
    ledger = MaskLedger.for_network(net)
    snapshots, checks, identical = [], 0, True
    for t, task in enumerate(tasks):
        allocate_task(net, ledger, task.x_train, task.y_train, p=50, epochs=10, seed=t)
        train_task(net, ledger, t, task.x_train, task.y_train, epochs=40, lr=0.05, seed=t)
        for s, logits in enumerate(snapshots):
            checks += 1
            identical &= np.array_equal(task_logits(net, ledger, s, tasks[s].x_test), logits)
        snapshots.append(task_logits(net, ledger, t, task.x_test))
    elapsed = time.perf_counter() - start
    ok = identical and checks == 3 and elapsed < 120
    record(4, ok, f"{checks} past-task logit checks bitwise identical: {identical}, {elapsed:.1f}s")
    assert ok


def test_criterion_05_memory_accounting():
    lenet, vgg = lenet5(), vgg11_half()
    rows = []
    for m in (1, 2, 5, 10, 20):
        rows.append(memory_account(lenet.neuron_counts, 61706, m).binaries == 142 * m)
        rows.append(memory_account(vgg.neuron_counts, 4_600_000, m).binaries == 1376 * m)
    ok = all(rows)
    record(5, ok, f"LeNet-5 {sum(lenet.neuron_counts)}*M and VGG11/2 {sum(vgg.neuron_counts)}*M bits for M in 1..20")
    assert ok


def test_criterion_06_desk_ensemble_trend(desk_runs):
    runs, elapsed = desk_runs
    ens = [r[1].report["evaluation"]["accuracy"] for r in runs]
    single = [r[2]["evaluation"]["accuracy"] for r in runs]
    over = [r[1].report["overhead"] for r in runs]
    worst = min(e - s for e, s in zip(ens, single))
    ok = np.mean(ens) >= np.mean(single) and worst >= -0.5 and max(over) < 5.0 and elapsed < 900
    record(6, ok, f"ensemble {np.mean(ens):.2f}% vs single {np.mean(single):.2f}% (per seed "
                  + ", ".join(f"{e:.1f}/{s:.1f}" for e, s in zip(ens, single))
                  + f"), worst gap {worst:+.2f} pts, overhead {np.mean(over):.3f}, {elapsed:.0f}s")
    assert ok


def test_criterion_07_pruning_sweep():
    cfg = ExperimentConfig(**DESK)
    ds = make_synthetic(cfg.dataset, cfg.classes, cfg.samples, seed=0, noise=cfg.noise)
    base = build_network(architecture_from_text(cfg.backbone, "", ds.input_shape, ds.n_classes), seed=0)
    sets = init_scaling_sets(base, cfg.members, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        train_scaling(base, sets, ds.x_train, ds.y_train, cfg.mask_epochs, lam=cfg.lam)
    values = []
    for p in (30, 50, 70, 80):
        members = [extract_subnetwork(base, bp) for bp in plan_ensemble(base, sets, p, cfg.scope, ds.x_train, ds.y_train)]
        values.append(overhead(members, base))
    ok = all(a > b for a, b in zip(values, values[1:]))
    record(7, ok, "overhead at p=30/50/70/80: " + " > ".join(f"{v:.3f}" for v in values))
    assert ok


def test_criterion_08_ece_oracle():
    confident = PredictionBatch(np.log(np.tile([0.95, 0.05], (40, 1))), np.zeros(40, int))
    a = ece(confident, 10)
    probs = np.vstack([np.tile([0.8, 0.2], (10, 1)), np.tile([0.6, 0.4], (10, 1))])
    labels = np.array([0] * 8 + [1] * 2 + [0] * 6 + [1] * 4)
    b = ece(PredictionBatch(np.log(probs), labels), 10)
    ok = abs(a - 0.05) <= 1e-12 and abs(b) <= 1e-12
    record(8, ok, f"single-bin case {a:.15f} (want 0.05), calibrated case {b:.1e} (want 0)")
    assert ok


def test_criterion_09_uncertainty_filtering(desk_runs):
    runs, _ = desk_runs
    lines, ok = [], True
    for seed, bundle, _ in runs:
        ds = make_synthetic("spirals", DESK["classes"], DESK["samples"], seed=seed, noise=DESK["noise"])
        dev = combine(bundle.models, ds.x_dev, ds.y_dev)
        th = entropy_threshold(dev.entropy[dev.correct])
        clean = filter_by_entropy(*_scored(bundle.models, ds.x_test, ds.y_test), th)
        # ten corruption draws per seed so the sigma=0.3 figures are not one noisy sample
        draws = [filter_by_entropy(*_scored(bundle.models, gaussian_corrupt(ds.x_test, 0.3, d), ds.y_test), th)
                 for d in range(10)]
        a = np.mean([r.accuracy for r in draws])
        fa = np.mean([r.filtered_accuracy if r.filtered_accuracy is not None else 0.0 for r in draws])
        d = np.mean([r.discarded for r in draws])
        good = (fa >= a and 0 < d < 100 and clean.discarded <= 30 and clean.filtered_accuracy is not None
                and abs(clean.filtered_accuracy - clean.accuracy) <= 2)
        ok &= good
        lines.append(f"seed {seed}: clean A {clean.accuracy:.1f} FA {clean.filtered_accuracy:.1f} "
                     f"D {clean.discarded:.1f}; sigma .3 A {a:.1f} FA {fa:.1f} D {d:.1f}")
    record(9, ok, " | ".join(lines))
    assert ok


def _scored(models, x, y):
    preds = combine(models, x, y)
    return preds.entropy, preds.correct


def test_criterion_10_cl_accuracy_oracle():
    value = cl_accuracy([[0.9, np.nan], [0.8, 0.7]])
    ok = value == 0.8
    record(10, ok, f"cl_accuracy(((0.9,.),(0.8,0.7))) = {value!r}")
    assert ok


def test_criterion_11_naive_vs_masked():
    start = time.perf_counter()
    drops = {}
    for mode in ("naive", "cl"):
        r = run_cl_pipeline(ExperimentConfig(mode=mode, **CL_DESK), persist=False).report["R"]
        drops[mode] = (r[0][0] - r[2][0]) * 100.0
    elapsed = time.perf_counter() - start
    ok = drops["naive"] >= 5.0 and drops["cl"] == 0.0 and elapsed < 300
    record(11, ok, f"task-1 drop naive {drops['naive']:.1f} pts, masked {drops['cl']:.1f} pts, {elapsed:.0f}s")
    assert ok


def test_criterion_12_determinism(tmp_path):
    cfg = ExperimentConfig(output=str(tmp_path / "run"), **{**DESK, "samples": 1500, "backbone": "mlp-32-32",
                                                             "members": 3, "epochs": 30, "patience": 10})
    first = (run_ensemble_pipeline(cfg).output_dir / "report.json").read_bytes()
    second = (run_ensemble_pipeline(cfg).output_dir / "report.json").read_bytes()
    ok = first == second and json.loads(first)["evaluation"]["accuracy"] is not None
    record(12, ok, f"two full pipeline runs, report.json {len(first)} bytes, identical: {first == second}")
    assert ok
