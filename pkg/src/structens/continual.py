"""Task-incremental learning with per-task neuron masks.

Tasks are indexed from 0.  ``AN_t`` is the set of neurons allocated to task
``t``; ``PAN_t`` is the union of all earlier allocations.  Task ``t`` runs the
backbone with outputs masked by ``AN_t | PAN_t`` and its own head ``t``, and
only weights owned by ``AN_t`` neurons (incoming weights plus bias) are ever
updated while training it.
"""
from __future__ import annotations

import struct
from fractions import Fraction
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .autograd import SGD, Tensor, no_grad
from .errors import CapacityExhaustedError, FormatError
from .network import Conv2d, Network, init_scaling_sets
from .saliency import compute_saliency, prune_indices, train_scaling

EXTRACTION_MODES = ("soft", "hard")


@dataclass
class MaskLedger:
    layer_sizes: list[int]
    masks: list[list[np.ndarray]] = field(default_factory=list)

    @classmethod
    def for_network(cls, net: Network) -> "MaskLedger":
        return cls(list(net.arch.neuron_counts))

    @property
    def n_tasks(self) -> int:
        return len(self.masks)

    def _check(self, t: int) -> None:
        if not 0 <= t < self.n_tasks:
            raise LookupError(f"unknown task {t}; {self.n_tasks} task(s) allocated")

    def pan(self, t: int) -> list[np.ndarray]:
        """Union of the masks of tasks before ``t``."""
        out = [np.zeros(n, dtype=bool) for n in self.layer_sizes]
        for task in self.masks[:t]:
            out = [a | b for a, b in zip(out, task)]
        return out

    def active(self, t: int) -> list[np.ndarray]:
        self._check(t)
        return [a | b for a, b in zip(self.masks[t], self.pan(t))]

    def trainable(self, t: int) -> list[np.ndarray]:
        self._check(t)
        return [a & ~b for a, b in zip(self.masks[t], self.pan(t))]

    def densities(self) -> list[list[float]]:
        return [[float(m.mean()) for m in task] for task in self.masks]

    def to_bytes(self) -> bytes:
        """Layer-size header, then every task's masks bit-packed with a length prefix per layer."""
        out = [struct.pack("<I", len(self.layer_sizes))]
        out += [struct.pack("<I", n) for n in self.layer_sizes]
        out.append(struct.pack("<I", self.n_tasks))
        for task in self.masks:
            for m in task:
                out.append(struct.pack("<I", m.size))
                out.append(np.packbits(m.astype(np.uint8)).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes, offset: int = 0) -> tuple["MaskLedger", int]:
        def u32(pos):
            if pos + 4 > len(blob):
                raise FormatError("truncated mask ledger", pos)
            return struct.unpack_from("<I", blob, pos)[0], pos + 4

        n_layers, pos = u32(offset)
        sizes = []
        for _ in range(n_layers):
            n, pos = u32(pos)
            sizes.append(n)
        n_tasks, pos = u32(pos)
        ledger = cls(sizes)
        for _ in range(n_tasks):
            task = []
            for expected in sizes:
                bits, pos = u32(pos)
                if bits != expected:
                    raise FormatError(f"mask length {bits} does not match layer size {expected}", pos - 4)
                nbytes = -(-bits // 8)
                if pos + nbytes > len(blob):
                    raise FormatError("truncated mask bits", pos)
                packed = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=pos)
                task.append(np.unpackbits(packed)[:bits].astype(bool))
                pos += nbytes
            ledger.masks.append(task)
        return ledger, pos


def _masks_as_scales(masks: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [m.astype(np.float64) for m in masks]


def allocate_task(net: Network, ledger: MaskLedger, x: np.ndarray, y: np.ndarray, p: float = 50.0,
                  scope: str = "per_layer", mode: str = "hard", epochs: int = 10, lr: float = 0.01,
                  batch_size: int = 64, momentum: float = 0.9, seed: int = 0,
                  dist: str = "normal(0,1)") -> list[np.ndarray]:
    """Pick ``AN_t`` for the next task and append it to the ledger.

    A fresh head is added when the network has none for this task.  Under hard
    extraction past neurons are excluded from the candidate pool (and pass
    through unscaled while the scaling vector trains); under soft extraction
    they compete, and any that win are dropped from ``AN_t`` afterwards.
    """
    if mode not in EXTRACTION_MODES:
        raise ValueError(f"mode must be one of {EXTRACTION_MODES}, got {mode!r}")
    t = ledger.n_tasks
    while len(net.heads) <= t:
        net.add_head(seed + 7919 * len(net.heads))
    pan = ledger.pan(t)
    hard = mode == "hard"
    if hard:
        for layer, past in enumerate(pan):
            if past.all():
                raise CapacityExhaustedError(layer, task=t)
    pinned = pan if hard else None
    s = init_scaling_sets(net, 1, dist, seed)[0]
    train_scaling(net, [s], x, y, epochs, lr=lr, lam=0.0, batch_size=batch_size, momentum=momentum,
                  seed=seed, head=t, pinned=pinned)
    saliency = compute_saliency(net, s, x, y, normalization=scope, head=t, pinned=pinned)
    try:
        kept = prune_indices(saliency, p, scope, protected=pan if hard else None)
    except CapacityExhaustedError as exc:
        raise CapacityExhaustedError(exc.layer, task=t) from None
    masks = []
    for idx, n, past in zip(kept, ledger.layer_sizes, pan):
        m = np.zeros(n, dtype=bool)
        m[idx] = True
        masks.append(m & ~past)
    ledger.masks.append(masks)
    return masks


def masked_forward(net: Network, ledger: MaskLedger, t: int, x) -> Tensor:
    return net.forward(x, _masks_as_scales(ledger.active(t)), head=t)


def weight_masks(net: Network, owners: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Gradient masks for backbone tensors: a weight belongs to the output neuron it feeds."""
    out = []
    j = 0
    for layer, params in zip(net.arch.backbone, net.backbone_params):
        if params is None:
            continue
        own = owners[j]
        j += 1
        if isinstance(layer, Conv2d):
            w = np.broadcast_to(own[:, None, None, None], params.weight.shape)
        else:
            w = np.broadcast_to(own[None, :], params.weight.shape)
        out.append(w.astype(np.float64))
        if params.bias is not None:
            out.append(own.astype(np.float64))
    return out


def _fit(net: Network, forward, params, masks, x, y, epochs, lr, momentum, batch_size, seed) -> list[float]:
    opt = SGD(params, lr, momentum)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            loss = ag.cross_entropy(forward(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(masks)
            total += loss.item() * len(idx)
        history.append(total / len(x))
    return history


def _only(net: Network, params: Sequence[Tensor]):
    keep = {id(t) for t in params}
    for t in net.parameters():
        t.requires_grad = id(t) in keep


def train_task(net: Network, ledger: MaskLedger, t: int, x: np.ndarray, y: np.ndarray, epochs: int,
               lr: float = 0.01, momentum: float = 0.9, batch_size: int = 64, seed: int = 0) -> list[float]:
    """Train backbone neurons of ``AN_t`` plus head ``t``; everything else stays bitwise fixed."""
    trainable = ledger.trainable(t)
    backbone = net.backbone_tensors()
    head = net.head_tensors(t)
    masks = weight_masks(net, trainable) + [None] * len(head)
    _only(net, backbone + head)
    try:
        return _fit(net, lambda xb: masked_forward(net, ledger, t, xb), backbone + head, masks,
                    x, y, epochs, lr, momentum, batch_size, seed)
    finally:
        net.set_requires_grad(True)


def train_naive(net: Network, t: int, x: np.ndarray, y: np.ndarray, epochs: int, lr: float = 0.01,
                momentum: float = 0.9, batch_size: int = 64, seed: int = 0) -> list[float]:
    """Baseline: train the whole backbone and head ``t`` with no masks at all."""
    while len(net.heads) <= t:
        net.add_head(seed + 7919 * len(net.heads))
    params = net.backbone_tensors() + net.head_tensors(t)
    _only(net, params)
    try:
        return _fit(net, lambda xb: net.forward(xb, head=t), params, None, x, y, epochs, lr, momentum,
                    batch_size, seed)
    finally:
        net.set_requires_grad(True)


def task_logits(net: Network, ledger: MaskLedger | None, t: int, x: np.ndarray) -> np.ndarray:
    with no_grad():
        if ledger is None:
            return net.forward(x, head=t).data
        return masked_forward(net, ledger, t, x).data


def task_accuracy(net: Network, ledger: MaskLedger | None, t: int, x: np.ndarray, y: np.ndarray) -> float:
    return float((task_logits(net, ledger, t, x).argmax(axis=1) == y).mean())


def cl_accuracy(r) -> float:
    """Mean of ``R[i, j]`` over ``i >= j``; ``R[i, j]`` is accuracy on task j after training task i."""
    r = np.array(r, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1] or r.shape[0] == 0:
        raise ValueError(f"R must be a non-empty square matrix, got shape {r.shape}")
    lower = r[np.tril_indices(r.shape[0])]
    if np.isnan(lower).any():
        raise ValueError("R has unfilled entries on or below the diagonal")
    # exact rational sum, so the mean is the correctly rounded value
    return float(sum(map(Fraction, lower.tolist())) / lower.size)


class MemoryAccount(NamedTuple):
    floats: int
    binaries: int
    binaries_per_base_param: float  # B / (b * M)


def memory_account(layer_sizes: Sequence[int] | MaskLedger, base_params: int, n_tasks: int,
                   head_params: int = 0) -> MemoryAccount:
    """Extra storage beyond one base network of ``base_params`` floats.

    Binaries: one bit per prunable backbone neuron per task.  Floats: the
    per-task heads beyond the one already counted in the base network (the
    backbone itself is shared, never duplicated).
    """
    if isinstance(layer_sizes, MaskLedger):
        layer_sizes = layer_sizes.layer_sizes
    binaries = n_tasks * int(sum(layer_sizes))
    ratio = binaries / (base_params * n_tasks) if n_tasks and base_params else 0.0
    return MemoryAccount(head_params * max(n_tasks - 1, 0), binaries, ratio)
