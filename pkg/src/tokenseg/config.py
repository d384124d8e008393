"""Run configuration and the flat ``key = value`` config-file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

STRATEGIES = ("random", "uniform-grid", "hierarchical", "boundary", "vq", "combined")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    levels: int = 4
    channels: tuple = (16, 32, 64, 128)
    token_dim: int = 64
    layout: tuple = (256, 96, 36, 12)
    k: int = 100
    codebook_size: int = 512
    strategy: str = "combined"
    theta: float = 0.5
    normalization: str = "minmax"
    boundary_radius: int = 2

    @property
    def n_tokens(self) -> int:
        return int(sum(self.layout))

    def validate(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if len(self.channels) != self.levels or len(self.layout) != self.levels:
            raise ConfigError(f"channels {self.channels} and layout {self.layout} "
                              f"need one entry per level ({self.levels})")
        if min(self.channels) < 1 or self.token_dim < 1:
            raise ConfigError("channel widths must be positive")
        if min(self.layout) < 1:
            raise ConfigError(f"every level needs at least one token, got {self.layout}")
        if not 1 <= self.k <= self.n_tokens:
            raise ConfigError(f"k={self.k} outside [1, {self.n_tokens}]")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta={self.theta} outside [0, 1]")
        if self.normalization != "minmax":
            raise ConfigError(f"unsupported normalization {self.normalization!r}")


@dataclass
class LossWeights:
    dice: float = 1.0
    bce: float = 0.5
    vq: float = 0.1
    beta: float = 0.25
    eps: float = 1e-5

    def validate(self):
        if min(self.dice, self.bce, self.vq, self.beta) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    min_lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    batch_size: int = 2
    max_epochs: int = 300
    patience: int = 30
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if self.min_lr > self.base_lr:
            raise ConfigError("min_lr must not exceed base_lr")
        if self.patience > self.max_epochs:
            raise ConfigError("patience must not exceed max_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.model.validate()
        self.loss.validate()
        return self


# flat-key aliases for the loss weights
_LOSS_KEYS = {"lambda_dice": "dice", "lambda_bce": "bce", "lambda_vq": "vq",
              "beta": "beta", "eps": "eps"}


def _convert(raw: str, current):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    return raw


def apply_overrides(cfg: TrainConfig, values: dict) -> TrainConfig:
    """Return a copy of ``cfg`` with flat string ``values`` applied."""
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model),
                              loss=dataclasses.replace(cfg.loss))
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"model", "loss"}
    for key, raw in values.items():
        raw = str(raw)
        try:
            if key in _LOSS_KEYS:
                name = _LOSS_KEYS[key]
                setattr(cfg.loss, name, _convert(raw, getattr(cfg.loss, name)))
            elif key in model_fields:
                setattr(cfg.model, key, _convert(raw, getattr(cfg.model, key)))
            elif key in train_fields:
                setattr(cfg, key, _convert(raw, getattr(cfg, key)))
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {raw!r}") from e
    return cfg


def parse_config_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return apply_overrides(base or TrainConfig(), parse_config_text(path.read_text()))


def flatten(cfg: TrainConfig) -> dict:
    """Resolved snapshot as ordered flat key/value strings (includes derived N and L)."""
    out = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("model", "loss"):
            continue
        out[f.name] = getattr(cfg, f.name)
    for f in dataclasses.fields(ModelConfig):
        out[f.name] = getattr(cfg.model, f.name)
    for key, name in _LOSS_KEYS.items():
        out[key] = getattr(cfg.loss, name)
    out["N"] = cfg.model.n_tokens
    out["K"] = cfg.model.k
    out["L"] = cfg.model.levels
    out["M"] = cfg.model.codebook_size
    return {k: ",".join(map(str, v)) if isinstance(v, tuple) else str(v) for k, v in out.items()}


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten(cfg).items())


def from_flat(values: dict) -> TrainConfig:
    """Inverse of :func:`flatten`; derived keys are ignored."""
    skip = {"N", "K", "L", "M"}
    return apply_overrides(TrainConfig(), {k: v for k, v in values.items() if k not in skip})
