"""Physical extraction of smaller networks from index sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .errors import BlueprintError
from .network import Architecture, Conv2d, Flatten, LayerParams, Linear, Network, ScalingSet
from .saliency import compute_saliency, prune_indices


@dataclass
class SubnetBlueprint:
    """Kept output indices for every prunable backbone layer."""

    kept: list[np.ndarray]

    @classmethod
    def full(cls, arch: Architecture) -> "SubnetBlueprint":
        return cls([np.arange(n) for n in arch.neuron_counts])

    def masks(self, arch: Architecture) -> list[np.ndarray]:
        """0/1 output masks equivalent to this blueprint."""
        out = []
        for idx, n in zip(self.kept, arch.neuron_counts):
            m = np.zeros(n)
            m[idx] = 1.0
            out.append(m)
        return out


def _validate(arch: Architecture, blueprint: SubnetBlueprint) -> list[np.ndarray]:
    widths = arch.neuron_counts
    if len(blueprint.kept) != len(widths):
        raise BlueprintError(f"blueprint has {len(blueprint.kept)} index sets, network has {len(widths)} prunable layers")
    kept = []
    for layer, (idx, n) in enumerate(zip(blueprint.kept, widths)):
        idx = np.asarray(idx, dtype=np.intp)
        if idx.ndim != 1 or idx.size == 0:
            raise BlueprintError(f"layer {layer}: index set must be a non-empty vector")
        if idx.min() < 0 or idx.max() >= n:
            raise BlueprintError(f"layer {layer}: indices must lie in [0, {n}), got [{idx.min()}, {idx.max()}]")
        if np.any(np.diff(idx) <= 0):
            raise BlueprintError(f"layer {layer}: indices must be sorted and unique")
        kept.append(idx)
    return kept


def _plan(arch: Architecture, blueprint: SubnetBlueprint):
    """Reduced layer specs plus (input, output) index slices of every parametrised layer."""
    kept = _validate(arch, blueprint)
    shapes = arch.shapes()
    n_backbone = len(arch.backbone)
    current = None  # surviving indices along the feature/channel axis; None keeps all
    j = 0
    layers, slices = [], []
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, (Linear, Conv2d)):
            n_in = layer.in_features if isinstance(layer, Linear) else layer.in_channels
            n_out = layer.out_features if isinstance(layer, Linear) else layer.out_channels
            in_idx = np.arange(n_in) if current is None else current
            if i < n_backbone:
                out_idx = kept[j]
                j += 1
                current = out_idx
            else:
                out_idx = np.arange(n_out)
                current = None
            if isinstance(layer, Linear):
                layers.append(Linear(len(in_idx), len(out_idx), layer.bias))
            else:
                layers.append(Conv2d(len(in_idx), len(out_idx), layer.kernel_size, layer.stride,
                                     layer.padding, layer.bias))
            slices.append((in_idx, out_idx))
        else:
            if isinstance(layer, Flatten) and current is not None:
                spatial = int(np.prod(shapes[i][1:]))
                current = (current[:, None] * spatial + np.arange(spatial)).ravel()
            layers.append(layer)
            slices.append(None)
    reduced = Architecture(arch.input_shape, tuple(layers[:n_backbone]), tuple(layers[n_backbone:]))
    return reduced, slices


def _slice(params: LayerParams | None, layer, cut) -> LayerParams | None:
    if params is None:
        return None
    in_idx, out_idx = cut
    if isinstance(layer, Linear):
        w = params.weight.data[np.ix_(in_idx, out_idx)]
    else:
        w = params.weight.data[out_idx][:, in_idx]
    b = None if params.bias is None else Tensor(params.bias.data[out_idx], requires_grad=True)
    return LayerParams(Tensor(w, requires_grad=True), b)


def extract_subnetwork(net: Network, blueprint: SubnetBlueprint) -> Network:
    """Copy the kept neurons (and the inputs they read) into a new, smaller network.

    The original network is left untouched; every head is sliced on its input side.
    """
    reduced, slices = _plan(net.arch, blueprint)
    n_backbone = len(net.arch.backbone)
    backbone = [_slice(p, layer, cut) for p, layer, cut in
                zip(net.backbone_params, net.arch.backbone, slices[:n_backbone])]
    heads = [[_slice(p, layer, cut) for p, layer, cut in zip(h, net.arch.head, slices[n_backbone:])]
             for h in net.heads]
    return Network(reduced, backbone, heads)


def reduced_architecture(arch: Architecture, blueprint: SubnetBlueprint) -> Architecture:
    return _plan(arch, blueprint)[0]


def plan_ensemble(net: Network, sets: Sequence[ScalingSet], p: float, scope: str,
                  x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> list[SubnetBlueprint]:
    blueprints = []
    for s in sets:
        saliency = compute_saliency(net, s, x, y, normalization=scope, batch_size=batch_size)
        blueprints.append(SubnetBlueprint(prune_indices(saliency, p, scope)))
    return blueprints


def extract_ensemble(net: Network, sets: Sequence[ScalingSet], p: float, scope: str,
                     x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> list[Network]:
    """One extracted member per scaling set, each cut from the same frozen network."""
    return [extract_subnetwork(net, bp) for bp in plan_ensemble(net, sets, p, scope, x, y, batch_size)]
