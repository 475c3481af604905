"""MMD distance between scaling vectors and the inverse-distance diversity penalty."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .network import ScalingSet

EPS = 1e-8


def _rbf_gram(a: Tensor, b: Tensor, n: int) -> Tensor:
    diff = ag.sub(ag.reshape(a, (n, 1)), ag.reshape(b, (1, n)))
    return ag.exp(ag.square(diff) * (-1.0 / n))


def mmd2(u, v) -> Tensor:
    """Squared MMD between two equal-length vectors treated as 1-D samples.

    Within-sample terms use the unbiased (off-diagonal) average, the cross
    term the biased one.  The kernel is ``exp(-(a-b)^2 / n)``.  The cross sum
    is accumulated over both orientations so that ``mmd2(u, v)`` and
    ``mmd2(v, u)`` agree bitwise.
    """
    u, v = ag.as_tensor(u), ag.as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ValueError(f"mmd2 needs two vectors of equal length, got {u.shape} and {v.shape}")
    n = u.shape[0]
    if n < 2:
        raise ValueError(f"mmd2 needs vectors of length >= 2, got {n}")
    off_diagonal = 1.0 - np.eye(n)
    within = ag.add(ag.tsum(ag.mul(_rbf_gram(u, u, n), off_diagonal)),
                    ag.tsum(ag.mul(_rbf_gram(v, v, n), off_diagonal)))
    k_uv = _rbf_gram(u, v, n)
    cross = ag.add(ag.tsum(k_uv), ag.tsum(ag.transpose(k_uv)))
    return ag.sub(within * (1.0 / (n * (n - 1))), cross * (1.0 / (n * n)))


def pair_distance(a: ScalingSet, b: ScalingSet) -> Tensor:
    """Sum over layers of the MMD^2 between the two members' scaling vectors."""
    total = None
    for va, vb in zip(a.vectors, b.vectors):
        d = mmd2(va, vb)
        total = d if total is None else ag.add(total, d)
    return total


def diversity_penalty(sets: Sequence[ScalingSet], lam: float, eps: float = EPS) -> Tensor:
    """``2*lam/(N(N-1)) * sum_{i<j} 1 / (R(S_i, S_j) + eps)``."""
    n = len(sets)
    if n < 2:
        raise ValueError(f"diversity penalty needs at least two members, got {n}")
    total = None
    for i in range(n):
        for j in range(i + 1, n):
            term = ag.div(1.0, ag.add(pair_distance(sets[i], sets[j]), eps))
            total = term if total is None else ag.add(total, term)
    return total * (2.0 * lam / (n * (n - 1)))
