"""Experiment configuration read from INI-style files."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError

MODES = ("ensemble", "cl", "single", "naive")
ALIASES = {"p": "prune", "n": "members", "lambda": "lam", "m": "tasks"}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    # [experiment]
    mode: str = "ensemble"
    seed: int = 0
    output: str = "out"
    # [model]
    backbone: str = "mlp-64-64"
    head: str = ""
    # [data]
    dataset: str = "spirals"  # spirals | gaussians | path to a data directory
    classes: int = 10
    samples: int = 4000
    noise: float = 0.1
    separation: float = 8.0
    # [ensemble]
    members: int = 5
    prune: float = 50.0
    scope: str = "per_layer"
    lam: float = 0.1
    mask_epochs: int = 10
    mask_lr: float = 0.01
    init: str = "normal(0,1)"
    # [continual]
    tasks: int = 3
    extraction: str = "hard"
    # [training]
    epochs: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.8
    decay_every: int = 50
    patience: int = 20
    batch_size: int = 64
    # [evaluation]
    ece_bins: int = 15
    fgsm_eps: tuple[float, ...] = field(default=(0.01, 0.05))
    noise_sigma: tuple[float, ...] = field(default=(0.0, 0.05, 0.1, 0.2, 0.3, 0.5))

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (self.scope in ("global", "per_layer"), "scope must be 'global' or 'per_layer'"),
            (self.extraction in ("soft", "hard"), "extraction must be 'soft' or 'hard'"),
            (self.members >= 1, "members must be >= 1"),
            (0 <= self.prune < 100, "prune must lie in [0, 100)"),
            (self.lam >= 0, "lam must be >= 0"),
            (self.classes >= 2, "classes must be >= 2"),
            (self.samples > 0, "samples must be positive"),
            (self.tasks >= 1, "tasks must be >= 1"),
            (min(self.mask_epochs, self.epochs, self.patience) >= 0, "epoch counts must be >= 0"),
            (self.lr > 0 and self.mask_lr > 0, "learning rates must be positive"),
            (0 <= self.momentum < 1, "momentum must lie in [0, 1)"),
            (0 < self.lr_decay <= 1, "lr_decay must lie in (0, 1]"),
            (self.decay_every >= 1 and self.batch_size >= 1 and self.ece_bins >= 1,
             "decay_every, batch_size and ece_bins must be >= 1"),
            (all(e >= 0 for e in self.fgsm_eps + self.noise_sigma), "perturbation sizes must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


SECTIONS = {
    "experiment": ("mode", "seed", "output"),
    "model": ("backbone", "head"),
    "data": ("dataset", "classes", "samples", "noise", "separation"),
    "ensemble": ("members", "prune", "scope", "lam", "mask_epochs", "mask_lr", "init"),
    "continual": ("tasks", "extraction"),
    "training": ("epochs", "lr", "momentum", "lr_decay", "decay_every", "patience", "batch_size"),
    "evaluation": ("ece_bins", "fgsm_eps", "noise_sigma"),
}

_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, text: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple"):
            return _floats(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None
    return text.strip()


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _convert(key, raw)
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, key)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
