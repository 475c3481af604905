"""Sequential networks with optional per-member scaling vectors.

A network is a backbone (the prunable part) followed by one or more heads.
Heads are classifier stacks that are never output-pruned; several heads exist
only in continual-learning mode, one per task.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConstructionError, DimensionError


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    bias: bool = True
    prunable = True


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    bias: bool = True
    prunable = True


@dataclass(frozen=True)
class ReLU:
    prunable = False


@dataclass(frozen=True)
class MaxPool2d:
    kernel_size: int
    prunable = False


@dataclass(frozen=True)
class Flatten:
    prunable = False


LayerSpec = Union[Linear, Conv2d, ReLU, MaxPool2d, Flatten]
_KINDS = {"linear": Linear, "conv2d": Conv2d, "relu": ReLU, "maxpool2d": MaxPool2d, "flatten": Flatten}
_NAMES = {cls: name for name, cls in _KINDS.items()}


def layer_to_dict(layer: LayerSpec) -> dict:
    return {"kind": _NAMES[type(layer)], **asdict(layer)}


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    return _KINDS[d.pop("kind")](**d)


def output_width(layer: LayerSpec) -> int:
    return layer.out_features if isinstance(layer, Linear) else layer.out_channels


def _output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Linear):
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise DimensionError(f"linear expects ({layer.in_features},) input, got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise DimensionError(f"conv2d expects {layer.in_channels} input channels, got {shape}")
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        if k > shape[1] + 2 * p or k > shape[2] + 2 * p:
            raise DimensionError(f"kernel {k} larger than padded input {shape}")
        return (layer.out_channels, (shape[1] + 2 * p - k) // s + 1, (shape[2] + 2 * p - k) // s + 1)
    if isinstance(layer, MaxPool2d):
        if len(shape) != 3 or shape[1] < layer.kernel_size or shape[2] < layer.kernel_size:
            raise DimensionError(f"maxpool({layer.kernel_size}) cannot reduce input {shape}")
        return (shape[0], shape[1] // layer.kernel_size, shape[2] // layer.kernel_size)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    return shape


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, ...]
    backbone: tuple[LayerSpec, ...]
    head: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "backbone", tuple(self.backbone))
        object.__setattr__(self, "head", tuple(self.head))
        self.shapes()  # validates the chain

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return self.backbone + self.head

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample input shape of every layer, followed by the final output shape."""
        shapes = [self.input_shape]
        prev = "input"
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(_output_shape(layer, shapes[-1]))
            except DimensionError as exc:
                raise ConstructionError(
                    f"cannot connect {prev} (output {shapes[-1]}) to layer {i} {layer}: {exc}") from None
            prev = f"layer {i} {layer}"
        if len(shapes[-1]) != 1:
            raise ConstructionError(f"head must end in a flat output, got {shapes[-1]}")
        return shapes

    @property
    def prunable_layers(self) -> list[int]:
        """Indices (into ``backbone``) of layers that carry a scaling vector."""
        return [i for i, layer in enumerate(self.backbone) if layer.prunable]

    @property
    def neuron_counts(self) -> list[int]:
        return [output_width(self.backbone[i]) for i in self.prunable_layers]

    @property
    def n_classes(self) -> int:
        return self.shapes()[-1][0]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "backbone": [layer_to_dict(layer) for layer in self.backbone],
            "head": [layer_to_dict(layer) for layer in self.head],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(d["input_shape"]),
                   tuple(layer_from_dict(x) for x in d["backbone"]),
                   tuple(layer_from_dict(x) for x in d["head"]))

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def layer_param_count(layer: LayerSpec) -> int:
    if isinstance(layer, Linear):
        return layer.in_features * layer.out_features + (layer.out_features if layer.bias else 0)
    if isinstance(layer, Conv2d):
        k = layer.kernel_size
        return layer.in_channels * layer.out_channels * k * k + (layer.out_channels if layer.bias else 0)
    return 0


# -- architecture presets and parsing ----------------------------------------

def mlp(in_features: int, hidden: Sequence[int], n_classes: int, bias: bool = True) -> Architecture:
    backbone: list[LayerSpec] = []
    width = in_features
    for h in hidden:
        backbone += [Linear(width, h, bias), ReLU()]
        width = h
    return Architecture((in_features,), tuple(backbone), (Linear(width, n_classes, bias),))


def lenet5(n_classes: int = 10, in_channels: int = 1, image_size: int = 28, bias: bool = True) -> Architecture:
    """LeNet-5 with a 6/16/120 backbone and a 84-unit hidden layer in the head."""
    pad = 2 if image_size == 28 else 0
    backbone = (
        Conv2d(in_channels, 6, 5, padding=pad, bias=bias), ReLU(), MaxPool2d(2),
        Conv2d(6, 16, 5, bias=bias), ReLU(), MaxPool2d(2),
        Flatten(), Linear(16 * 5 * 5, 120, bias), ReLU(),
    )
    head = (Linear(120, 84, bias), ReLU(), Linear(84, n_classes, bias))
    return Architecture((in_channels, image_size, image_size), backbone, head)


def vgg11_half(n_classes: int = 10, in_channels: int = 3, image_size: int = 32, bias: bool = True) -> Architecture:
    """VGG11 with every conv width halved; 32x32 inputs reduce to 1x1 after five pools."""
    plan = [32, "M", 64, "M", 128, 128, "M", 256, 256, "M", 256, 256, "M"]
    backbone: list[LayerSpec] = []
    channels = in_channels
    for item in plan:
        if item == "M":
            backbone.append(MaxPool2d(2))
        else:
            backbone += [Conv2d(channels, item, 3, padding=1, bias=bias), ReLU()]
            channels = item
    side = image_size // 32
    head = (Flatten(), Linear(channels * side * side, n_classes, bias))
    return Architecture((in_channels, image_size, image_size), tuple(backbone), head)


_TOKEN = re.compile(r"([a-z0-9_]+)(?:\(([^)]*)\))?")


def _parse_args(text: str | None) -> tuple[list[int], dict[str, int]]:
    positional, named = [], {}
    for part in filter(None, (p.strip() for p in (text or "").split(","))):
        if "=" in part:
            key, value = part.split("=", 1)
            named[key.strip()] = int(value)
        else:
            positional.append(int(part))
    return positional, named


def parse_layers(text: str, input_shape: Sequence[int]) -> tuple[list[LayerSpec], tuple[int, ...]]:
    """Parse ``"conv(6,5,pad=2) relu maxpool(2) flatten linear(120)"``.

    Input widths are inferred from ``input_shape``; returns the layers and the
    shape they produce.
    """
    layers: list[LayerSpec] = []
    shape = tuple(input_shape)
    for name, args in _TOKEN.findall(text.replace(";", " ")):
        pos, kw = _parse_args(args)
        bias = bool(kw.pop("bias", 1))
        if name == "linear":
            layer = Linear(shape[0] if len(shape) == 1 else -1, pos[0], bias)
        elif name == "conv":
            layer = Conv2d(shape[0], pos[0], pos[1], kw.pop("stride", 1), kw.pop("pad", 0), bias)
        elif name == "relu":
            layer = ReLU()
        elif name == "maxpool":
            layer = MaxPool2d(pos[0])
        elif name == "flatten":
            layer = Flatten()
        else:
            raise ConstructionError(f"unknown layer '{name}'")
        if kw:
            raise ConstructionError(f"unknown options {sorted(kw)} for layer '{name}'")
        try:
            shape = _output_shape(layer, shape)
        except DimensionError as exc:
            raise ConstructionError(f"cannot append {layer} after shape {shape}: {exc}") from None
        layers.append(layer)
    return layers, shape


def architecture_from_text(backbone: str, head: str, input_shape: Sequence[int], n_classes: int) -> Architecture:
    """Build an architecture from layer strings; a final ``linear(n_classes)`` closes the head."""
    presets = {"lenet5": lenet5, "vgg11_half": vgg11_half}
    name = backbone.strip()
    if name in presets:
        c, h = input_shape[0], input_shape[-1]
        return presets[name](n_classes, in_channels=c, image_size=h)
    if name.startswith("mlp"):
        hidden = [int(v) for v in name.split("-")[1:]]
        if len(input_shape) != 1:
            raise ConstructionError(f"mlp presets need flat inputs, got {tuple(input_shape)}")
        return mlp(input_shape[0], hidden, n_classes)
    layers, shape = parse_layers(backbone, input_shape)
    head_layers, shape = parse_layers(head, shape) if head.strip() else ([], shape)
    if len(shape) != 1:
        head_layers.append(Flatten())
        shape = (int(np.prod(shape)),)
    head_layers.append(Linear(shape[0], n_classes))
    return Architecture(tuple(input_shape), tuple(layers), tuple(head_layers))


# -- parameterised network -----------------------------------------------------

@dataclass
class LayerParams:
    weight: Tensor
    bias: Tensor | None

    def tensors(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def _init_layer(layer: LayerSpec, rng: np.random.Generator) -> LayerParams | None:
    if isinstance(layer, Linear):
        bound = 1.0 / math.sqrt(layer.in_features)
        w = rng.uniform(-bound, bound, size=(layer.in_features, layer.out_features))
        b = rng.uniform(-bound, bound, size=layer.out_features) if layer.bias else None
    elif isinstance(layer, Conv2d):
        k = layer.kernel_size
        bound = 1.0 / math.sqrt(layer.in_channels * k * k)
        w = rng.uniform(-bound, bound, size=(layer.out_channels, layer.in_channels, k, k))
        b = rng.uniform(-bound, bound, size=layer.out_channels) if layer.bias else None
    else:
        return None
    return LayerParams(Tensor(w, requires_grad=True), None if b is None else Tensor(b, requires_grad=True))


def apply_layer(layer: LayerSpec, params: LayerParams | None, x: Tensor) -> Tensor:
    if isinstance(layer, Linear):
        out = ag.matmul(x, params.weight)
        return out if params.bias is None else ag.add(out, params.bias)
    if isinstance(layer, Conv2d):
        return ag.conv2d(x, params.weight, params.bias, layer.stride, layer.padding)
    if isinstance(layer, ReLU):
        return ag.relu(x)
    if isinstance(layer, MaxPool2d):
        return ag.maxpool2d(x, layer.kernel_size)
    return ag.flatten(x)


@dataclass
class Network:
    """Parameterised architecture.

    ``backbone_params`` is aligned with ``arch.backbone``; ``heads`` holds one
    parameter list per head, each aligned with ``arch.head``.  Linear weights
    are stored ``(in, out)``; conv kernels ``(out, in, k, k)``.
    """

    arch: Architecture
    backbone_params: list[LayerParams | None]
    heads: list[list[LayerParams | None]] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    def add_head(self, seed: int) -> int:
        rng = np.random.default_rng(seed)
        self.heads.append([_init_layer(layer, rng) for layer in self.arch.head])
        return len(self.heads) - 1

    def backbone_tensors(self) -> list[Tensor]:
        return [t for p in self.backbone_params if p is not None for t in p.tensors()]

    def head_tensors(self, head: int = 0) -> list[Tensor]:
        return [t for p in self.heads[head] if p is not None for t in p.tensors()]

    def parameters(self) -> list[Tensor]:
        out = self.backbone_tensors()
        for h in range(len(self.heads)):
            out += self.head_tensors(h)
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def features(self, x, scales: Sequence | None = None) -> Tensor:
        """Backbone forward; ``scales[j]`` multiplies the output of the j-th prunable layer."""
        x = ag.as_tensor(x)
        if scales is not None and len(scales) != len(self.arch.prunable_layers):
            raise DimensionError(
                f"got {len(scales)} scaling vectors for {len(self.arch.prunable_layers)} prunable layers")
        j = 0
        for layer, params in zip(self.arch.backbone, self.backbone_params):
            x = apply_layer(layer, params, x)
            if layer.prunable:
                if scales is not None and scales[j] is not None:
                    x = ag.elementwise_mul(x, scales[j])
                j += 1
        return x

    def classify(self, features: Tensor, head: int = 0) -> Tensor:
        x = features
        for layer, params in zip(self.arch.head, self.heads[head]):
            x = apply_layer(layer, params, x)
        return x

    def forward(self, x, scales: Sequence | None = None, head: int = 0) -> Tensor:
        return self.classify(self.features(x, scales), head)

    __call__ = forward

    def copy(self) -> "Network":
        def dup(p: LayerParams | None):
            if p is None:
                return None
            return LayerParams(Tensor(p.weight.data, True), None if p.bias is None else Tensor(p.bias.data, True))

        return Network(self.arch, [dup(p) for p in self.backbone_params], [[dup(p) for p in h] for h in self.heads])

    def state(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.parameters()]

    def load_state(self, state: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(params) != len(state):
            raise DimensionError(f"state has {len(state)} arrays, network has {len(params)} tensors")
        for t, arr in zip(params, state):
            if t.shape != arr.shape:
                raise DimensionError(f"state array {arr.shape} does not match parameter {t.shape}")
            t.data = np.array(arr, dtype=np.float64)


def build_network(arch: Architecture, seed: int, n_heads: int = 1) -> Network:
    """Initialise every weight and bias from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    net = Network(arch, [_init_layer(layer, rng) for layer in arch.backbone], [])
    for _ in range(n_heads):
        net.heads.append([_init_layer(layer, rng) for layer in arch.head])
    return net


# -- scaling vectors -------------------------------------------------------------

@dataclass
class ScalingSet:
    member_index: int
    vectors: list[Tensor]

    def parameters(self) -> list[Tensor]:
        return self.vectors

    def arrays(self) -> list[np.ndarray]:
        return [v.data.copy() for v in self.vectors]


_DIST = re.compile(r"^\s*(normal|uniform)\s*\(\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*\)\s*$")


def parse_distribution(dist: str | tuple) -> tuple[str, float, float]:
    if isinstance(dist, tuple):
        kind, a, b = dist
        return str(kind), float(a), float(b)
    m = _DIST.match(dist)
    if not m:
        raise ValueError(f"distribution must look like 'normal(0,1)' or 'uniform(a,b)', got {dist!r}")
    return m.group(1), float(m.group(2)), float(m.group(3))


def init_scaling_sets(net: Network, n_members: int, dist: str | tuple = "normal(0,1)",
                      seed: int = 0) -> list[ScalingSet]:
    """One scaling vector per prunable backbone layer for each of ``n_members`` members."""
    if n_members < 1:
        raise ValueError(f"need at least one member, got {n_members}")
    kind, a, b = parse_distribution(dist)
    rng = np.random.default_rng(seed)
    sets = []
    for i in range(n_members):
        vectors = []
        for width in net.arch.neuron_counts:
            values = rng.normal(a, b, width) if kind == "normal" else rng.uniform(a, b, width)
            vectors.append(Tensor(values, requires_grad=True))
        sets.append(ScalingSet(i, vectors))
    return sets


def check_scaling_set(net: Network, s: ScalingSet) -> None:
    widths = net.arch.neuron_counts
    if len(s.vectors) != len(widths) or any(v.shape != (w,) for v, w in zip(s.vectors, widths)):
        raise DimensionError(
            f"scaling set shapes {[v.shape for v in s.vectors]} do not match prunable widths {widths}")


def pin_scale(scale, pinned: np.ndarray | None):
    """Force the scale of ``pinned`` neurons to exactly 1 (pass-through)."""
    if pinned is None or not np.any(pinned):
        return scale
    pinned = np.asarray(pinned, dtype=np.float64)
    return ag.add(ag.mul(scale, 1.0 - pinned), pinned)


def scaled_forward(net: Network, s: ScalingSet, x, head: int = 0,
                   pinned: Sequence[np.ndarray | None] | None = None) -> Tensor:
    check_scaling_set(net, s)
    scales = s.vectors if pinned is None else [pin_scale(v, p) for v, p in zip(s.vectors, pinned)]
    return net.forward(x, scales, head)


def partition_indices(batch_size: int, n_members: int) -> list[np.ndarray]:
    """Row indices of each member's sub-batch, all of size ceil(B/N).

    Originals are split into contiguous, nearly equal chunks; members that
    come up short are padded round-robin with the earliest samples they do not
    already hold, so no sub-batch repeats a sample.
    """
    if batch_size < 1 or n_members < 1:
        raise ValueError(f"need a positive batch and member count, got B={batch_size}, N={n_members}")
    size = -(-batch_size // n_members)
    chunks = [list(c) for c in np.array_split(np.arange(batch_size), n_members)]
    cursor = 0
    for chunk in chunks:
        own = set(chunk)
        while len(chunk) < size:
            candidate = cursor % batch_size
            cursor += 1
            if candidate not in own:
                chunk.append(candidate)
                own.add(candidate)
    return [np.asarray(c, dtype=np.intp) for c in chunks]


def partition_batch(x: np.ndarray, y: np.ndarray, n_members: int) -> list[tuple[np.ndarray, np.ndarray]]:
    parts = partition_indices(len(x), n_members)
    return [(x[p], y[p]) for p in parts]


def partitioned_forward(net: Network, sets: Sequence[ScalingSet], x: np.ndarray,
                        parts: Sequence[np.ndarray], head: int = 0,
                        pinned: Sequence[np.ndarray | None] | None = None) -> Tensor:
    """Forward every member's sub-batch in one pass; row blocks follow ``parts`` order."""
    rows = np.concatenate(parts)
    member_of_row = np.repeat(np.arange(len(sets)), [len(p) for p in parts])
    scales = []
    for j in range(len(net.arch.prunable_layers)):
        stacked = ag.stack([s.vectors[j] for s in sets])
        if pinned is not None:
            stacked = pin_scale(stacked, pinned[j])
        scales.append(ag.take(stacked, member_of_row))
    return net.forward(x[rows], scales, head)
