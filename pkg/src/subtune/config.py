"""Run configuration: one nested dataclass tree, YAML loading with strict
unknown-key rejection, and the default preset used by the end-to-end runs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import DataConfig
from .decomposition import DecompositionConfig
from .losses import LossWeights
from .masking import StatsConfig
from .model import ModelConfig


@dataclass
class MaskSection:
    active_layer_budget: int = 16
    warmup_steps: int | None = None  # None: one epoch of steps

    def validate(self) -> None:
        if self.active_layer_budget < 1:
            raise ValueError(f"active_layer_budget must be >= 1, got {self.active_layer_budget}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}")


@dataclass
class OptimizerSection:
    mode: str = "adaptive"
    learning_rate: float = 2e-4
    batch_size: int = 32
    epochs: int = 10

    def validate(self) -> None:
        if self.mode not in ("plain", "adaptive"):
            raise ValueError(f"optimizer mode must be plain or adaptive, got {self.mode!r}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class PretrainSection:
    learning_rate: float = 1e-2
    batch_size: int = 32
    max_epochs: int = 40
    accuracy_floor: float = 0.9

    def validate(self) -> None:
        if self.learning_rate <= 0.0:
            raise ValueError("pretrain learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("pretrain batch_size must be >= 1 and max_epochs >= 0")
        if not 0.0 < self.accuracy_floor <= 1.0:
            raise ValueError("accuracy_floor must be in (0, 1]")


@dataclass
class TrainConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    decomposition: DecompositionConfig = field(default_factory=DecompositionConfig)
    mask: MaskSection = field(default_factory=MaskSection)
    stats: StatsConfig = field(default_factory=StatsConfig)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    weights: LossWeights = field(default_factory=LossWeights)

    def finalize(self) -> "TrainConfig":
        """Propagate shared scalars into the sections that mirror them, then
        validate everything.  Token grid and seed have one source of truth."""
        self.model.decomposition = self.decomposition
        self.data.n_tokens = self.model.n_tokens
        self.data.d_model = self.model.d_model
        self.data.n_base_classes = self.model.n_classes_pretrain
        self.data.seed = self.seed
        self.decomposition.validate()
        self.data.validate()
        self.mask.validate()
        self.stats.validate()
        self.optimizer.validate()
        self.pretrain.validate()
        if self.mask.active_layer_budget > self.model.n_decomposable:
            raise ValueError(
                f"active_layer_budget {self.mask.active_layer_budget} exceeds the "
                f"{self.model.n_decomposable} decomposable layers"
            )
        if self.weights.orth_weight < 0.0 or self.weights.spectral_weight < 0.0:
            raise ValueError("loss weights must be >= 0")
        return self


# YAML sections that may not restate scalars owned elsewhere in the tree
_BLOCKED_KEYS = {
    "data": {"n_tokens": "model.n_tokens", "d_model": "model.d_model",
             "n_base_classes": "model.n_classes_pretrain", "seed": "seed"},
    "model": {"decomposition": "decomposition"},
}


def _fill_section(obj, section: dict, path: str):
    valid = {f.name: f for f in fields(obj)}
    blocked = _BLOCKED_KEYS.get(path, {})
    for key, value in section.items():
        where = f"{path}.{key}" if path else key
        if key in blocked:
            raise ValueError(f"config key {where} is set via {blocked[key]}")
        if key not in valid:
            raise ValueError(f"config key {where} is not recognized")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and not isinstance(current, type):
            if not isinstance(value, dict):
                raise ValueError(f"config key {where} must be a mapping")
            _fill_section(current, value, where)
        else:
            if isinstance(value, dict):
                raise ValueError(f"config key {where} does not take a mapping")
            if isinstance(value, list):
                value = tuple(value)
            setattr(obj, key, value)
    return obj


def config_from_dict(raw: dict) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ValueError("config root must be a mapping")
    cfg = TrainConfig()
    _fill_section(cfg, raw, "")
    return cfg.finalize()


def load_config(path: str | Path) -> TrainConfig:
    with Path(path).open() as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def default_config(seed: int = 0) -> TrainConfig:
    return config_from_dict({"seed": seed})


def config_to_dict(cfg: TrainConfig) -> dict:
    """JSON-friendly echo of the whole tree (tuples become lists)."""

    def convert(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: convert(getattr(value, f.name)) for f in fields(value)}
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        return value

    return convert(cfg)
