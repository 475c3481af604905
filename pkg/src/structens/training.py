"""Supervised training of a single network with step decay and early stopping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import SGD
from .metrics import predict_logits
from .network import Network


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    dev_accuracy: list[float] = field(default_factory=list)  # entry 0 is the untrained network
    best_epoch: int = 0
    best_dev_accuracy: float = 0.0
    stopped_early: bool = False


def dev_accuracy(net: Network, x: np.ndarray, y: np.ndarray, head: int = 0) -> float:
    return float((predict_logits(net, x, head).argmax(axis=1) == y).mean())


def train_network(net: Network, x: np.ndarray, y: np.ndarray, x_dev: np.ndarray, y_dev: np.ndarray,
                  epochs: int, lr: float = 0.01, momentum: float = 0.9, lr_decay: float = 0.8,
                  decay_every: int = 50, patience: int = 20, batch_size: int = 64, seed: int = 0,
                  head: int = 0) -> TrainHistory:
    """Momentum SGD on cross-entropy; the learning rate is multiplied by ``lr_decay`` every ``decay_every`` epochs.

    The dev accuracy is checked after every epoch.  Training stops once it has
    not improved for ``patience`` epochs (``patience=0`` disables stopping) and
    the best checkpoint, ties going to the earliest, is restored in place.
    """
    params = net.backbone_tensors() + net.head_tensors(head)
    opt = SGD(params, lr, momentum)
    rng = np.random.default_rng(seed)
    history = TrainHistory()
    best_state = net.state()
    history.best_dev_accuracy = dev_accuracy(net, x_dev, y_dev, head)
    history.dev_accuracy.append(history.best_dev_accuracy)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            loss = ag.cross_entropy(net.forward(x[idx], head=head), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.losses.append(total / len(x))
        if epoch % decay_every == 0:
            opt.lr *= lr_decay
        acc = dev_accuracy(net, x_dev, y_dev, head)
        history.dev_accuracy.append(acc)
        if acc > history.best_dev_accuracy:
            history.best_dev_accuracy, history.best_epoch = acc, epoch
            best_state = net.state()
        elif patience and epoch - history.best_epoch >= patience:
            history.stopped_early = True
            break
    net.load_state(best_state)
    return history
