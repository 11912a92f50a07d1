"""Experiment configuration: a versioned YAML file validated before any work starts.

Example::

    schema_version: 1
    seed: 0
    output_dir: runs/demo
    model: {kind: qeegnet, n_qubits: 4, n_layers: 2}
    train: {epochs: 50, batch_size: 32}
    data:
      synth: {n_trials: 200, n_channels: 4, n_samples: 128}
      zscore: true
    split: {protocol: loso, params: {held_out: 1}}
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import PROTOCOLS, SynthSpec
from .errors import ConfigurationError
from .model import ModelConfig
from .train import TrainConfig
from .vqc import VqcConfig

SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    kind: Literal["eegnet", "qeegnet"] = "qeegnet"
    temporal_filters: int = Field(8, ge=1)
    depth_multiplier: int = Field(2, ge=1)
    pointwise_filters: int = Field(16, ge=1)
    temporal_kernel: Optional[int] = Field(None, ge=1)
    separable_kernel: int = Field(16, ge=1)
    pool1: int = Field(4, ge=1)
    pool2: int = Field(8, ge=1)
    n_qubits: int = Field(4, ge=1)
    n_layers: int = Field(2, ge=1)
    dropout_rate: float = Field(0.25, ge=0, lt=1)
    elu_alpha: float = Field(1.0, gt=0)

    def build(self, n_channels: int, n_samples: int, n_classes: int, sample_rate: float) -> ModelConfig:
        fields = self.model_dump(exclude={"kind", "n_qubits", "n_layers"})
        quantum = self.kind == "qeegnet"
        return ModelConfig(
            n_channels=n_channels, n_samples=n_samples, n_classes=n_classes, sample_rate=sample_rate,
            embedding_dim=self.n_qubits,
            vqc=VqcConfig(self.n_qubits, self.n_layers) if quantum else None, **fields,
        )


class TrainSection(_Section):
    batch_size: int = 32
    epochs: int = 100
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    loss: Literal["cross_entropy", "mse"] = "cross_entropy"
    selector: Literal["val_accuracy", "val_loss"] = "val_accuracy"
    decay_quantum: bool = False

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.model_dump())


class SynthSection(_Section):
    n_trials: int = 200
    n_channels: int = 4
    n_samples: int = 128
    n_classes: int = 2
    sample_rate: float = 128.0
    class_signal: Optional[list[tuple[float, float]]] = None
    noise_sigma: float = 1.0
    n_subjects: int = 4
    n_sessions: int = 1
    seed: Optional[int] = None  # defaults to the experiment seed

    def build(self, seed: int) -> SynthSpec:
        fields = self.model_dump(exclude={"seed"})
        return SynthSpec(seed=seed if self.seed is None else self.seed, **fields)


class DataSection(_Section):
    path: Optional[str] = None
    synth: Optional[SynthSection] = None
    bandpass: Optional[tuple[float, float]] = None
    resample: Optional[float] = Field(None, gt=0)
    zscore: bool = True

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synth is None):
            raise ValueError("data needs exactly one of 'path' or 'synth'")
        return self


class SplitSection(_Section):
    protocol: Literal[PROTOCOLS] = "loso"  # type: ignore[valid-type]
    params: dict = Field(default_factory=dict)
    all_folds: bool = False  # run every LOSO subject / k-fold group and aggregate
    seed: Optional[int] = None


class ExperimentConfig(_Section):
    schema_version: Literal[1]
    seed: int = 0
    output_dir: str = "runs"
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    data: DataSection = Field(default_factory=lambda: DataSection(synth=SynthSection()))
    split: SplitSection = Field(default_factory=SplitSection)

    def check(self) -> None:
        """Domain checks beyond the schema (raises ConfigurationError)."""
        self.train.build(self.seed)
        if self.data.synth is not None:
            spec = self.data.synth.build(self.seed)
            self.model.build(spec.n_channels, spec.n_samples, spec.n_classes, spec.sample_rate)


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "invalid config: " + "; ".join(parts)


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping")
    if "schema_version" not in raw:
        raise ConfigurationError(f"config is missing schema_version (current version is {SCHEMA_VERSION})")
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(_format_validation(exc)) from None
    if base_dir is not None and cfg.data.path is not None and not Path(cfg.data.path).is_absolute():
        cfg.data.path = str(base_dir / cfg.data.path)
    cfg.check()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    return parse_config(raw, path.parent)


def default_config() -> ExperimentConfig:
    return parse_config({"schema_version": SCHEMA_VERSION})
