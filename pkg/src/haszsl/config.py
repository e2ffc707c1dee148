"""Strict JSON experiment configuration.

Unknown keys anywhere are errors: a misspelled loss weight must not silently
fall back to its default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .adversarial import PerturbConfig
from .augment import AugmentPolicy
from .data import DataConfig
from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig

# ranges the sweep tooling uses when no grid is given
DEFAULT_SWEEP_GRIDS = {
    "lambda1": [0.01, 0.1, 1.0],
    "lambda2": [0.1, 1.0, 10.0],
    "lambda3": [1e-5, 1e-4, 1e-3],
    "epsilon": [1.0, 2.0, 4.0, 8.0],
}


@dataclass
class DatasetSection:
    path: str | None = None
    n_attributes: int = 8
    n_seen: int = 12
    n_unseen: int = 4
    per_class: int = 40
    image_size: int = 16
    patch_size: int = 4
    noise_sigma: float = 0.05
    seed: int = 0


@dataclass
class ModelSection:
    hidden_channels: int = 16
    channels: int = 32


@dataclass
class TrainSection:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 5e-3
    beta1: float = 0.5
    beta2: float = 0.999
    lr_decay: float = 0.8
    decay_every: int = 10
    loc_weight: float = 1.0
    adversarial_enabled: bool = True
    record_wall_time: bool = False


@dataclass
class PerturbSection:
    epsilon: float = 4.0  # 0-255 pixel scale
    steps: int = 3
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1e-4
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    paper_literal_signs: bool = False


@dataclass
class EvalSection:
    mu_grid: list | None = None
    mu: float | None = None
    drift_images: int = 64
    drift_steps: int = 10


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    perturb: PerturbSection = field(default_factory=PerturbSection)
    eval: EvalSection = field(default_factory=EvalSection)
    augment: list = field(default_factory=list)
    output_dir: str = "runs/default"
    seeds: list = field(default_factory=lambda: [0])

    # -- conversions -------------------------------------------------------
    def data_config(self) -> DataConfig:
        d = dataclasses.asdict(self.dataset)
        d.pop("path")
        return DataConfig(**d)

    def model_config(self) -> ModelConfig:
        return ModelConfig(hidden_channels=self.model.hidden_channels, channels=self.model.channels,
                           n_attributes=self.dataset.n_attributes, image_size=self.dataset.image_size)

    def perturb_config(self, **overrides) -> PerturbConfig:
        p = dataclasses.asdict(self.perturb)
        p.update(overrides)
        try:
            return PerturbConfig(epsilon=p["epsilon"] / 255.0, steps=p["steps"],
                                 weights=LossWeights(p["lambda1"], p["lambda2"], p["lambda3"]),
                                 clamp_lo=p["clamp_lo"], clamp_hi=p["clamp_hi"],
                                 paper_literal_signs=p["paper_literal_signs"])
        except ValueError as exc:
            raise ConfigError(f"perturb: {exc}") from exc

    def train_config(self, seed: int, **perturb_overrides) -> TrainConfig:
        t = dataclasses.asdict(self.train)
        try:
            return TrainConfig(perturb=self.perturb_config(**perturb_overrides), seed=seed, **t)
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def policies(self) -> list[AugmentPolicy]:
        return [AugmentPolicy(**p) for p in self.augment]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"dataset": DatasetSection, "model": ModelSection, "train": TrainSection,
             "perturb": PerturbSection, "eval": EvalSection}
_POLICY_KEYS = {"kind", "strength", "apply_prob", "name"}


def _check_type(where: str, value: Any, annotation: str) -> Any:
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(f"{where}: must not be null")
    if "bool" in annotation:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    elif "int" in annotation:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif "float" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif "str" in annotation:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif "list" in annotation:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def _section(name: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown key (allowed: {', '.join(fields)})")
    kwargs = {k: _check_type(f"{name}.{k}", v, str(fields[k].type)) for k, v in raw.items()}
    return cls(**kwargs)


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    allowed = set(_SECTIONS) | {"augment", "output_dir", "seeds"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown top-level key (allowed: {', '.join(sorted(allowed))})")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _section(name, cls, raw[name])
    if "augment" in raw:
        if not isinstance(raw["augment"], list):
            raise ConfigError("augment: expected a list of policies")
        for i, p in enumerate(raw["augment"]):
            if not isinstance(p, dict):
                raise ConfigError(f"augment[{i}]: expected an object")
            bad = sorted(set(p) - _POLICY_KEYS)
            if bad:
                raise ConfigError(f"augment[{i}].{bad[0]}: unknown key")
            AugmentPolicy(**p)
        kwargs["augment"] = raw["augment"]
    if "output_dir" in raw:
        kwargs["output_dir"] = _check_type("output_dir", raw["output_dir"], "str")
    if "seeds" in raw:
        seeds = _check_type("seeds", raw["seeds"], "list")
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds: expected a nonempty list of integers")
        kwargs["seeds"] = seeds
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.data_config().validate()
        cfg.model_config()
        cfg.train_config(cfg.seeds[0])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.eval.mu_grid is not None and (not cfg.eval.mu_grid or not all(
            isinstance(m, (int, float)) and not isinstance(m, bool) for m in cfg.eval.mu_grid)):
        raise ConfigError("eval.mu_grid: expected a nonempty list of numbers")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)
