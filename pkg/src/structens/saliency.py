"""Scaling-vector training, gradient saliency, thresholds and index selection."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import SGD, Tensor
from .diversity import diversity_penalty
from .errors import CapacityExhaustedError, DegenerateSaliencyError
from .network import Network, ScalingSet, partition_indices, partitioned_forward, pin_scale

SCOPES = ("global", "per_layer")

IndexSets = list  # list[np.ndarray] of sorted kept indices, one per prunable layer


@dataclass
class SaliencyMap:
    values: list[np.ndarray]
    normalization: str = "global"

    def flat(self) -> np.ndarray:
        return np.concatenate(self.values)


def _check_scope(scope: str) -> None:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")


def scaling_objective(net: Network, sets: Sequence[ScalingSet], x: np.ndarray, y: np.ndarray, lam: float,
                      head: int = 0, pinned: Sequence[np.ndarray | None] | None = None) -> Tensor:
    """Cross-entropy of the member-partitioned batch plus the diversity penalty when N > 1."""
    parts = partition_indices(len(x), len(sets))
    logits = partitioned_forward(net, sets, x, parts, head, pinned)
    objective = ag.cross_entropy(logits, y[np.concatenate(parts)])
    if len(sets) > 1 and lam > 0:
        objective = ag.add(objective, diversity_penalty(sets, lam))
    return objective


def train_scaling(net: Network, sets: Sequence[ScalingSet], x: np.ndarray, y: np.ndarray,
                  epochs: int, lr: float = 0.01, lam: float = 0.1, batch_size: int = 64,
                  momentum: float = 0.9, seed: int = 0, head: int = 0,
                  pinned: Sequence[np.ndarray | None] | None = None) -> list[float]:
    """Train the scaling vectors of all members in parallel; network weights stay frozen.

    Each mini-batch is split across members with ``partition_indices`` and the
    objective is the mean cross-entropy plus the diversity penalty (for N > 1).
    ``sets`` are updated in place.  Returns the mean objective of every epoch.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    n_members = len(sets)
    if n_members == 1 and lam > 0:
        warnings.warn("diversity regulariser needs two or more members; skipping it", stacklevel=2)
    opt = SGD([v for s in sets for v in s.vectors], lr, momentum)
    rng = np.random.default_rng(seed)
    history = []
    net.set_requires_grad(False)
    try:
        for _ in range(epochs):
            order = rng.permutation(len(x))
            total, seen = 0.0, 0
            for start in range(0, len(x), batch_size):
                idx = order[start:start + batch_size]
                objective = scaling_objective(net, sets, x[idx], y[idx], lam, head, pinned)
                opt.zero_grad()
                objective.backward()
                opt.step()
                total += objective.item() * len(idx)
                seen += len(idx)
            history.append(total / seen)
    finally:
        net.set_requires_grad(True)
    return history


def scaling_gradients(net: Network, s: ScalingSet, x: np.ndarray, y: np.ndarray,
                      batch_size: int = 256, head: int = 0,
                      pinned: Sequence[np.ndarray | None] | None = None) -> list[np.ndarray]:
    """Gradient of the dataset-mean loss w.r.t. each scaling vector, accumulated batch-wise."""
    leaves = [Tensor(v.data, requires_grad=True) for v in s.vectors]
    acc = [np.zeros_like(v.data) for v in leaves]
    net.set_requires_grad(False)
    try:
        for start in range(0, len(x), batch_size):
            sl = slice(start, start + batch_size)
            scales = leaves if pinned is None else [pin_scale(v, p) for v, p in zip(leaves, pinned)]
            loss = ag.cross_entropy(net.forward(x[sl], scales, head), y[sl], reduction="sum")
            loss.backward()
            for a, leaf in zip(acc, leaves):
                a += leaf.grad
                leaf.zero_grad()
    finally:
        net.set_requires_grad(True)
    return [a / len(x) for a in acc]


def normalize_saliency(gradients: Sequence[np.ndarray], normalization: str = "global") -> SaliencyMap:
    """Absolute gradients divided by their global (or per-layer) sum."""
    _check_scope(normalization)
    magnitudes = [np.abs(np.asarray(g, dtype=np.float64)) for g in gradients]
    grand = sum(m.sum() for m in magnitudes)
    if grand == 0.0:
        raise DegenerateSaliencyError("all scaling-vector gradients are zero; cannot rank neurons")
    if normalization == "global":
        return SaliencyMap([m / grand for m in magnitudes], normalization)
    return SaliencyMap([m / m.sum() if m.sum() > 0 else m for m in magnitudes], normalization)


def compute_saliency(net: Network, s: ScalingSet, x: np.ndarray, y: np.ndarray,
                     normalization: str = "global", batch_size: int = 256, head: int = 0,
                     pinned: Sequence[np.ndarray | None] | None = None) -> SaliencyMap:
    grads = scaling_gradients(net, s, x, y, batch_size, head, pinned)
    return normalize_saliency(grads, normalization)


def _candidates(saliency: SaliencyMap, protected) -> list[np.ndarray]:
    if protected is None:
        return [np.ones(v.shape, dtype=bool) for v in saliency.values]
    return [~np.asarray(p, dtype=bool) for p in protected]


def threshold(saliency: SaliencyMap, p: float, scope: str = "global",
              protected: Sequence[np.ndarray] | None = None) -> float | list[float]:
    """p-th percentile (linear interpolation) of the candidate saliency values.

    Protected neurons are excluded from the pool.  A layer without candidates
    gets an infinite per-layer threshold.
    """
    _check_scope(scope)
    if not 0 <= p < 100:
        raise ValueError(f"pruning percentage must lie in [0, 100), got {p}")
    cands = _candidates(saliency, protected)
    if scope == "global":
        pool = np.concatenate([v[c] for v, c in zip(saliency.values, cands)])
        return float(np.percentile(pool, p)) if pool.size else float("inf")
    return [float(np.percentile(v[c], p)) if c.any() else float("inf")
            for v, c in zip(saliency.values, cands)]


def select_indices(saliency: SaliencyMap, th: float | Sequence[float],
                   protected: Sequence[np.ndarray] | None = None) -> IndexSets:
    """Indices whose saliency strictly exceeds the threshold.

    A layer that would end up empty keeps its single most salient candidate
    (lowest index on ties).  Protected neurons are never selected; a layer with
    no unprotected neuron raises ``CapacityExhaustedError``.
    """
    per_layer = np.broadcast_to(np.asarray(th, dtype=np.float64), (len(saliency.values),))
    out = []
    for layer, (values, cand, t) in enumerate(zip(saliency.values, _candidates(saliency, protected), per_layer)):
        if not cand.any():
            raise CapacityExhaustedError(layer)
        keep = np.flatnonzero(cand & (values > t))
        if keep.size == 0:
            keep = np.array([int(np.argmax(np.where(cand, values, -np.inf)))])
        out.append(keep.astype(np.intp))
    return out


def prune_indices(saliency: SaliencyMap, p: float, scope: str = "global",
                  protected: Sequence[np.ndarray] | None = None) -> IndexSets:
    return select_indices(saliency, threshold(saliency, p, scope, protected), protected)
