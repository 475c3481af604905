"""Small deterministic reverse-mode autodiff engine over float64 numpy arrays.

Every differentiable operation appends itself to an implicit tape by taking
the next value of a global sequence counter.  ``Tensor.backward`` collects the
operations reachable from the output and replays their backward rules in
strictly decreasing sequence order, i.e. exact reverse order of recording.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

_sequence = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """Dense float64 array with a same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = -1

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        The recorded graph is released afterwards, so each forward pass can be
        differentiated once.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        nodes = _reachable(self)
        self.grad = self.grad + np.asarray(grad, dtype=np.float64)
        for node in nodes:
            node._backward(node.grad)
            node._backward = None
            node._parents = ()

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or node._backward is None:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node._parents)
    out.sort(key=lambda n: n._seq, reverse=True)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = np.zeros_like(data)
    out._seq = -1
    out._parents = ()
    out._backward = None
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_sequence)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, unbroadcast(g, a.shape))
        _accumulate(b, unbroadcast(g, b.shape))

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, unbroadcast(g, a.shape))
        _accumulate(b, unbroadcast(-g, b.shape))

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, unbroadcast(g * a.data, b.shape))

    return _record(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: _accumulate(a, -g))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: _accumulate(a, 2.0 * a.data * g))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _record(out_data, (a,), lambda g: _accumulate(a, g * out_data))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def relu(a) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _record(np.where(positive, a.data, 0.0), (a,), lambda g: _accumulate(a, g * positive))


def elementwise_mul(a, b) -> Tensor:
    """Scale every output neuron (dim 1, or dim 0 for a 1-D ``a``) of ``a`` by ``b``.

    ``b`` holds one value per neuron/channel, either shared across the batch
    (shape ``(o,)``) or given per row (shape ``(B, o)``).  Trailing spatial
    dimensions of convolutional activations are broadcast.
    """
    a, b = as_tensor(a), as_tensor(b)
    axis = 1 if a.ndim >= 2 else 0
    o = a.shape[axis]
    if b.ndim == 1:
        if b.shape[0] != o:
            raise DimensionError(f"scale has {b.shape[0]} values but operand {a.shape} has {o} neurons")
        target = [1] * a.ndim
        target[axis] = o
    elif b.ndim == 2 and a.ndim >= 2:
        if b.shape != (a.shape[0], o):
            raise DimensionError(f"per-row scale {b.shape} does not match operand {a.shape}")
        target = [a.shape[0], o] + [1] * (a.ndim - 2)
    else:
        raise DimensionError(f"cannot scale operand {a.shape} by {b.shape}")
    if list(b.shape) != target:
        b = reshape(b, tuple(target))
    return mul(a, b)


# -- reductions and shape ----------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def flatten(a) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: _accumulate(a, g.T))


def stack(tensors: Iterable[Tensor]) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(ts):
            _accumulate(t, g[i])

    return _record(np.stack([t.data for t in ts]), ts, backward)


def take(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated rows accumulate their gradients."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, index, g)
            a.grad += acc

    return _record(a.data[index], (a,), backward)


def pick(a, labels) -> Tensor:
    """Select ``a[i, labels[i]]`` for every row ``i``."""
    a = as_tensor(a)
    labels = np.asarray(labels, dtype=np.intp)
    rows = np.arange(a.shape[0])

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[rows, labels] = g
            a.grad += acc

    return _record(a.data[rows, labels], (a,), backward)


# -- linear algebra and layers -----------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _record(a.data @ b.data, (a, b), backward)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``(B, C_in, H, W)`` or a single ``(C_in, H, W)`` sample, ``w`` is
    ``(C_out, C_in, k, k)`` and ``b`` is ``(C_out,)`` or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    batch, c_in, height, width = x.shape
    c_out, wc_in, kh, kw = w.shape
    if wc_in != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise DimensionError(f"kernel {w.shape} larger than padded input {x.shape} (padding {padding})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * h_out * w_out, c_in * kh * kw)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(batch, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise DimensionError(f"conv2d bias {b.shape} does not match {c_out} output channels")
        out = out + b.data[None, :, None, None]
        parents.append(b)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        if w.requires_grad:
            w.grad += (g2.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            b.grad += g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(batch, h_out, w_out, c_in, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x.grad += dxp

    result = _record(out, parents, backward)
    return reshape(result, result.shape[1:]) if single else result


def maxpool2d(x, kernel_size: int) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    x = as_tensor(x)
    k = kernel_size
    batch, channels, height, width = x.shape
    ho, wo = height // k, width // k
    if ho == 0 or wo == 0:
        raise DimensionError(f"pool size {k} larger than input {x.shape}")
    cropped = x.data[:, :, :ho * k, :wo * k]
    blocks = cropped.reshape(batch, channels, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        batch, channels, ho, wo, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(batch, channels, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            batch, channels, ho * k, wo * k)
        x.grad[:, :, :ho * k, :wo * k] += gb

    return _record(out, (x,), backward)


# -- losses --------------------------------------------------------------------

def _check_labels(labels: np.ndarray, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _record(out, (a,), lambda g: _accumulate(a, g - probs * g.sum(axis=-1, keepdims=True)))


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``(B, c)`` logits against integer labels."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B, c) logits, got {logits.shape}")
    batch, classes = logits.shape
    labels = _check_labels(labels, batch, classes)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(batch)
    total = -logp[rows, labels].sum()
    scale = 1.0 / batch if reduction == "mean" else 1.0

    def backward(g):
        if logits.requires_grad:
            d = np.exp(logp)
            d[rows, labels] -= 1.0
            logits.grad += d * (g * scale)

    return _record(np.asarray(total * scale), (logits,), backward)


# -- optimisation ----------------------------------------------------------------

class SGD:
    """Momentum SGD: ``v <- mu*v + g``; ``w <- w - lr*v``.

    ``step`` accepts optional per-parameter binary masks.  Entries where the
    mask is 0 keep both their value and their velocity bitwise unchanged.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, masks: Sequence[np.ndarray | None] | None = None) -> None:
        if masks is not None and len(masks) != len(self.params):
            raise DimensionError(f"got {len(masks)} masks for {len(self.params)} parameters")
        for i, p in enumerate(self.params):
            mask = None if masks is None else masks[i]
            v = self.velocity[i]
            if mask is None:
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * v
                continue
            mask = np.asarray(mask)
            if mask.shape != p.shape:
                raise DimensionError(f"mask shape {mask.shape} does not match parameter {p.shape}")
            keep = mask.astype(bool)
            self.velocity[i] = v = np.where(keep, self.momentum * v + p.grad, v)
            p.data = np.where(keep, p.data - self.lr * v, p.data)
