"""Ensemble combination and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .network import Network

MODES = ("avg_softmax", "majority_vote")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis (0 log 0 = 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


@dataclass
class PredictionBatch:
    """Per-model logits ``(n_models, n_samples, c)`` and optional labels."""

    logits: np.ndarray
    labels: np.ndarray | None = None
    mode: str = "avg_softmax"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim == 2:
            self.logits = self.logits[None]

    @property
    def n_models(self) -> int:
        return self.logits.shape[0]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[2]

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits).mean(axis=0)

    @property
    def predicted(self) -> np.ndarray:
        probs = self.probs
        if self.mode == "avg_softmax":
            return probs.argmax(axis=1)
        votes = self.logits.argmax(axis=2)
        counts = np.stack([(votes == k).sum(axis=0) for k in range(self.n_classes)], axis=1)
        tied = counts == counts.max(axis=1, keepdims=True)
        return np.where(tied, probs, -np.inf).argmax(axis=1)

    @property
    def confidence(self) -> np.ndarray:
        probs = self.probs
        return probs[np.arange(len(probs)), self.predicted]

    @property
    def correct(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("prediction batch has no labels")
        return self.predicted == self.labels

    @property
    def entropy(self) -> np.ndarray:
        return entropy(self.probs)


def predict_logits(net: Network, x: np.ndarray, head: int = 0, batch_size: int = 1024,
                   masks: Sequence[np.ndarray] | None = None) -> np.ndarray:
    with no_grad():
        return np.concatenate([net.forward(x[i:i + batch_size], masks, head).data
                               for i in range(0, len(x), batch_size)])


def combine(models: Sequence[Network], x: np.ndarray, y: np.ndarray | None = None,
            mode: str = "avg_softmax", head: int = 0) -> PredictionBatch:
    if not models:
        raise ValueError("cannot combine an empty list of models")
    classes = {m.n_classes for m in models}
    if len(classes) != 1:
        raise ValueError(f"models disagree on class count: {sorted(classes)}")
    logits = np.stack([predict_logits(m, x, head) for m in models])
    return PredictionBatch(logits, None if y is None else np.asarray(y), mode)


def accuracy(preds: PredictionBatch) -> float:
    return float(preds.correct.mean())


def ece(preds: PredictionBatch, n_bins: int = 15) -> float:
    """Expected calibration error with equal-width bins ((z-1)/Z, z/Z]."""
    if n_bins < 1:
        raise ValueError(f"need at least one bin, got {n_bins}")
    conf = preds.confidence
    if conf.size == 0:
        raise ValueError("ECE of an empty prediction set is undefined")
    correct = preds.correct.astype(np.float64)
    bins = np.clip(np.searchsorted(np.linspace(0.0, 1.0, n_bins + 1), conf, side="left"), 1, n_bins)
    total = 0.0
    for z in range(1, n_bins + 1):
        members = bins == z
        count = members.sum()
        if count:
            total += count / conf.size * abs(correct[members].mean() - conf[members].mean())
    return float(total)


def diversity_score(preds: PredictionBatch, subset: str) -> float:
    """Mean normalised entropy (0-100) of the softmax of averaged logits.

    ``subset`` picks samples the ensemble classifies correctly or wrongly.
    """
    if preds.n_models < 2:
        raise ValueError(f"diversity needs at least two models, got {preds.n_models}")
    if subset not in ("correct", "wrong"):
        raise ValueError(f"subset must be 'correct' or 'wrong', got {subset!r}")
    chosen = preds.correct if subset == "correct" else ~preds.correct
    if not chosen.any():
        raise ValueError(f"diversity on an empty '{subset}' subset is undefined")
    averaged = preds.logits.mean(axis=0)[chosen]
    scores = entropy(softmax(averaged)) / math.log(preds.n_classes) * 100.0
    return float(scores.mean())


def input_gradient(models: Network | Sequence[Network], x: np.ndarray, y: np.ndarray, head: int = 0) -> np.ndarray:
    """Gradient w.r.t. ``x`` of the mean cross-entropy of the ensemble's averaged softmax."""
    models = [models] if isinstance(models, Network) else list(models)
    xt = Tensor(x, requires_grad=True)
    probs = None
    for m in models:
        m.set_requires_grad(False)
    try:
        for m in models:
            p = ag.exp(ag.log_softmax(m.forward(xt, head=head)))
            probs = p if probs is None else ag.add(probs, p)
        loss = ag.neg(ag.mean(ag.log(ag.pick(probs * (1.0 / len(models)), y))))
        loss.backward()
    finally:
        for m in models:
            m.set_requires_grad(True)
    return xt.grad


def fgsm(models: Network | Sequence[Network], x: np.ndarray, y: np.ndarray, eps: float,
         head: int = 0) -> np.ndarray:
    """``clip(x + eps * sign(dL/dx), 0, 1)`` with L the cross-entropy of the averaged softmax."""
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    return np.clip(x + eps * np.sign(input_gradient(models, x, y, head)), 0.0, 1.0)


def gaussian_corrupt(x: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    return np.clip(x + rng.normal(0.0, sigma, size=x.shape), 0.0, 1.0) if sigma else x.copy()


def entropy_threshold(dev_entropies: np.ndarray, q: float = 75.0) -> float:
    h = np.asarray(dev_entropies, dtype=np.float64)
    if h.size == 0:
        raise ValueError("entropy threshold needs at least one development entropy")
    return float(np.percentile(h, q))


class FilterResult(NamedTuple):
    accuracy: float
    filtered_accuracy: float | None
    discarded: float
    threshold: float


def filter_by_entropy(entropies: np.ndarray, correct: np.ndarray, threshold: float) -> FilterResult:
    """Discard samples whose entropy exceeds ``threshold``; all figures in percent."""
    entropies = np.asarray(entropies, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    kept = entropies <= threshold
    fa = float(correct[kept].mean() * 100.0) if kept.any() else None
    return FilterResult(float(correct.mean() * 100.0), fa, float((~kept).mean() * 100.0), float(threshold))


def uncertainty_filter(dev_entropies: np.ndarray, eval_preds: PredictionBatch) -> FilterResult:
    """A / FA / D with the threshold at the 75th percentile of ``dev_entropies``."""
    return filter_by_entropy(eval_preds.entropy, eval_preds.correct, entropy_threshold(dev_entropies))


def overhead(ensemble: Sequence[Network], base: Network) -> float:
    return sum(m.param_count() for m in ensemble) / base.param_count()
