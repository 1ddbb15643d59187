"""Strict JSON experiment configuration.

Every section rejects unknown keys, and validation errors are re-raised as
``ConfigError`` with the dotted key path of each offending field.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .adversarial import AdvConfig, FineTuneConfig
from .meta import MetaConfig
from .models import ModelConfig
from .synth import DomainSpec, TaskFamilySpec

SCHEMA_VERSION = 1
TOGGLES = ("meta", "adversarial", "embeddings", "dynamic_adjust", "attention")


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FamilySection(_Strict):
    family: Literal["gaussian_blobs", "two_arcs"] = "gaussian_blobs"
    num_classes: int = Field(2, ge=2)
    input_dim: int = Field(2, ge=2)
    radius: float = Field(2.0, gt=0)
    spread: float = Field(1.0, ge=0)
    label_flip: float = Field(0.0, ge=0, lt=0.5)
    means: Optional[tuple[tuple[float, ...], ...]] = None
    task_rotation: float = Field(0.5, ge=0)
    task_translation: float = Field(0.5, ge=0)

    def build(self) -> TaskFamilySpec:
        return TaskFamilySpec(**self.model_dump())


class DomainSection(_Strict):
    rotation: float = 0.0
    translation: tuple[float, ...] = ()
    scale: float = Field(1.0, gt=0)
    noise: float = Field(0.0, ge=0)

    def build(self) -> DomainSpec:
        return DomainSpec(**self.model_dump())


class DataSection(_Strict):
    n_per_domain: int = Field(400, ge=20)
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    n_finetune: int = Field(20, ge=1)
    standardize: bool = True

    @field_validator("split")
    @classmethod
    def _split_sums_to_one(cls, v):
        if any(f <= 0 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("split fractions must be positive and sum to 1")
        return v


class ModelSection(_Strict):
    extractor_hidden: tuple[int, ...] = (32, 32)
    feature_dim: int = Field(16, ge=1)
    classifier_hidden: tuple[int, ...] = ()
    discriminator_hidden: tuple[int, ...] = (16,)
    gate_hidden: tuple[int, ...] = (16,)

    @field_validator("extractor_hidden", "classifier_hidden", "discriminator_hidden", "gate_hidden")
    @classmethod
    def _positive_widths(cls, v):
        if any(w < 1 for w in v):
            raise ValueError("layer widths must be positive")
        return v


class MetaSection(_Strict):
    inner_lr: float = Field(0.01, ge=0)
    outer_lr: float = Field(0.001, ge=0)
    inner_steps: int = Field(1, ge=0)
    meta_batch_size: int = Field(4, ge=1)
    mode: Literal["first_order", "exact"] = "first_order"
    optimizer: Literal["sgd", "adam"] = "adam"
    lr_decay: float = Field(0.1, gt=0)
    decay_every_epochs: int = Field(10, ge=1)
    epoch_size: int = Field(100, ge=1)
    iterations: int = Field(200, ge=1)
    n_support: int = Field(10, ge=1)
    n_query: int = Field(30, ge=1)

    def build(self) -> MetaConfig:
        return MetaConfig(self.inner_lr, self.outer_lr, self.inner_steps, self.meta_batch_size, self.mode,
                          self.optimizer, lr_decay=self.lr_decay, decay_every_epochs=self.decay_every_epochs,
                          epoch_size=self.epoch_size)


class AdversarialSection(_Strict):
    eta_D: float = Field(0.05, gt=0)
    eta_F: float = Field(0.05, gt=0)
    eta_C: float = Field(0.05, gt=0)
    lambda_adv: float = Field(0.1, ge=0)
    d_steps_per_f_step: int = Field(1, ge=1)
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(32, ge=1)

    def build(self, lambda_adv: float | None = None) -> AdvConfig:
        d = self.model_dump()
        if lambda_adv is not None:
            d["lambda_adv"] = lambda_adv
        return AdvConfig(**d)


class EmbeddingSection(_Strict):
    dim: int = Field(16, ge=1)
    hidden: tuple[int, ...] = (16,)
    epochs: int = Field(50, ge=1)
    lr: float = Field(0.001, ge=0)
    batch_size: int = Field(32, ge=1)
    joint_epochs: int = Field(0, ge=0)
    lambda_e: float = Field(0.1, ge=0)


class FineTuneSection(_Strict):
    steps: int = Field(50, ge=0)
    eta_F: float = Field(0.05, ge=0)
    eta_C: float = Field(0.05, ge=0)
    eta_E: float = Field(0.0, ge=0)

    def build(self) -> FineTuneConfig:
        return FineTuneConfig(**self.model_dump())


class ToggleSection(_Strict):
    meta: bool = True
    adversarial: bool = True
    embeddings: bool = True
    dynamic_adjust: bool = True
    attention: bool = True

    def without(self, name: str) -> ToggleSection:
        if name not in TOGGLES:
            raise ConfigError(f"unknown toggle {name!r}; expected one of {', '.join(TOGGLES)}")
        return self.model_copy(update={name: False})

    def enabled(self) -> list[str]:
        return [t for t in TOGGLES if getattr(self, t)]


def _grid(v):
    if any(g < 0 for g in v) or any(b <= a for a, b in zip(v, v[1:])):
        raise ValueError("grids must be non-negative and strictly increasing")
    return v


class RobustnessSection(_Strict):
    fgsm_grid: tuple[float, ...] = (0.0, 0.1, 0.25)
    pgd_grid: tuple[float, ...] = (0.0, 0.1)
    noise_grid: tuple[float, ...] = (0.0, 0.1, 0.25)
    pgd_steps: int = Field(10, ge=1)

    @field_validator("fgsm_grid", "pgd_grid", "noise_grid")
    @classmethod
    def _grids(cls, v):
        return _grid(v)


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    family: FamilySection = FamilySection()
    source: DomainSection = DomainSection()
    target: DomainSection = DomainSection(translation=(0.0, 6.0))
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    meta: MetaSection = MetaSection()
    adversarial: AdversarialSection = AdversarialSection()
    embeddings: EmbeddingSection = EmbeddingSection()
    fine_tune: FineTuneSection = FineTuneSection()
    toggles: ToggleSection = ToggleSection()
    robustness: RobustnessSection = RobustnessSection()
    out_dir: str = "runs/default"

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v or any(s < 0 for s in v) or len(set(v)) != len(v):
            raise ValueError("seeds must be a nonempty list of distinct non-negative integers")
        return v

    @model_validator(mode="after")
    def _shapes(self):
        d = self.family.input_dim
        for name in ("source", "target"):
            t = getattr(self, name).translation
            if t and len(t) != d:
                raise ValueError(f"{name}.translation has {len(t)} entries but family.input_dim is {d}")
        return self

    def task_family(self) -> TaskFamilySpec:
        return self.family.build()

    def model_config_for(self, toggles: ToggleSection | None = None) -> ModelConfig:
        toggles = toggles or self.toggles
        m = self.model
        return ModelConfig(self.family.input_dim, self.family.num_classes, m.extractor_hidden, m.feature_dim,
                           m.classifier_hidden, m.discriminator_hidden, m.gate_hidden, self.embeddings.dim,
                           toggles.dynamic_adjust, toggles.attention)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data)


def preset(name: str) -> ExperimentConfig:
    """``desk`` is the default template; ``wide`` uses wide layers and a 128-dim embedding."""
    if name == "desk":
        return ExperimentConfig()
    if name == "wide":
        return ExperimentConfig(model=ModelSection(extractor_hidden=(512, 256), feature_dim=256,
                                                   discriminator_hidden=(256,), gate_hidden=(256,)),
                                embeddings=EmbeddingSection(dim=128, hidden=(256,)))
    raise ConfigError(f"unknown preset {name!r}; expected desk or wide")
