"""Run configuration: a YAML file validated against a strict schema."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ._validation import ConfigurationError
from .backbone import EncoderConfig
from .datasets import CORRUPTION_KINDS
from .training import TrainConfig
from .uncertainty import METHODS


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    n_per_class: int = Field(200, ge=1)
    image_size: int = Field(64, ge=32)
    seed: int = 0
    # one kind per shifted rung, mild acquisition changes first, unrelated content last
    ladder_kinds: list[str] = ["blur", "gaussian_noise", "hue_shift", "uniform_noise_replace"]
    ladder_severities: list[float] = [0.0, 0.25, 0.5, 0.75, 1.0]
    external_dirs: list[str] = []

    @field_validator("ladder_kinds")
    @classmethod
    def _kinds(cls, v):
        bad = [k for k in v if k not in CORRUPTION_KINDS]
        if bad or not v:
            raise ValueError(f"ladder_kinds must be non-empty and drawn from {CORRUPTION_KINDS}, got {v}")
        return v

    @field_validator("ladder_severities")
    @classmethod
    def _severities(cls, v):
        if not v or any(not 0 <= s <= 1 for s in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("ladder_severities must be non-empty, strictly increasing and within [0, 1]")
        return v

    @model_validator(mode="after")
    def _ladder_shape(self):
        n_shifted = sum(1 for s in self.ladder_severities if s > 0)
        if len(self.ladder_kinds) not in (1, n_shifted):
            raise ValueError("ladder_kinds needs one entry, or one per nonzero severity")
        return self


class ModelSection(_Strict):
    num_blocks: int = 4
    channels: list[int] = [16, 32, 64, 128]
    downsample: list[bool] = [False, True, True, True]
    stem_channels: int = 16
    stem_stride: int = 2
    dropout_rate: float = 0.0
    activation: Literal["relu", "silu", "softplus"] = "relu"


class StageSection(_Strict):
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(8, ge=1)
    max_epochs: int = Field(40, ge=1)
    patience: int = Field(5, ge=1)


class G0Section(StageSection):
    freeze: bool = True


class TrainingSection(_Strict):
    classifier: StageSection = StageSection(learning_rate=3e-4, batch_size=4, max_epochs=40, patience=8)
    g1: StageSection = StageSection()
    g0: G0Section = G0Section()


class EvalSection(_Strict):
    methods: list[Literal["drue", "rue", "entropy", "mc_dropout"]] = list(METHODS)
    seeds: list[int] = [0, 1, 2]
    mc_passes: int = Field(20, ge=1)
    mc_dropout_rate: float = Field(0.3, ge=0, lt=1)
    n_bins: int = Field(30, ge=1)

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("seeds must be a non-empty list of distinct integers")
        return v


class TheorySection(_Strict):
    scales: list[float] = [1e-1, 1e-2, 1e-3]
    gap_scales: list[float] = [1.0, 1e-1, 1e-2, 1e-3]
    n_images: int = Field(4, ge=1)
    smooth_activation: Literal["silu", "softplus"] = "silu"
    smooth_epochs: int = Field(10, ge=1)


class PathsSection(_Strict):
    run_dir: str = "runs/default"


class RunConfig(_Strict):
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    eval: EvalSection = EvalSection()
    theory: TheorySection = TheorySection()
    paths: PathsSection = PathsSection()

    @model_validator(mode="after")
    def _encoder_consistent(self):
        self.encoder_config()
        return self

    def encoder_config(self) -> EncoderConfig:
        m = self.model
        return EncoderConfig(
            num_blocks=m.num_blocks,
            channels=list(m.channels),
            downsample=list(m.downsample),
            stem_channels=m.stem_channels,
            stem_stride=m.stem_stride,
            image_size=self.dataset.image_size,
            dropout_rate=m.dropout_rate,
            activation=m.activation,
        )

    def train_config(self, stage: str, seed: int) -> TrainConfig:
        s = getattr(self.training, stage)
        return TrainConfig(
            learning_rate=s.learning_rate, batch_size=s.batch_size, max_epochs=s.max_epochs,
            patience=s.patience, seed=seed, stage=stage,
        )

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every seed field replaced by ``seed``."""
        data = self.model_dump()
        data["dataset"]["seed"] = seed
        data["eval"]["seeds"] = [seed]
        return RunConfig.model_validate(data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(), sort_keys=False)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load and validate a YAML run config; ``None`` gives the defaults."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} not found")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first["loc"])
        raise ConfigurationError(f"invalid config at {loc or '<root>'}: {first['msg']}") from None
    except ConfigurationError as exc:
        raise ConfigurationError(f"invalid model section: {exc}") from None
