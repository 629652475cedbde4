"""
Process settings (environment) and the per-run configuration file.

A run config is YAML with one section per stage:

    sampling: {patch_count: 100, points_per_patch: 1024, seed: 0}
    model:    {scale: "1/8", repeats: [1, 1, 2, 2, 1]}
    train:    {lr: 1.0e-5, epochs: 500, ablation: full}
    eval:     {seed: 0, logistic: false, repeats: 5}

Unknown keys anywhere are rejected. Command-line flags override file values.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from .errors import ConfigError
from .nn import ModelConfig
from .sampling import SamplingConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-wide defaults, overridable through FREQPCQA_* variables"""

    # Worker threads for extraction and scoring; 0 means all cores
    threads: int = Field(default=0, ge=0)
    log_level: str = "INFO"

    # Patch seed used whenever a cloud is scored rather than trained on
    eval_seed: int = Field(default=0, ge=0)

    # Share of training references held out for model selection
    validation_fraction: float = Field(default=0.1, ge=0, lt=1)

    class Config:
        env_prefix = "FREQPCQA_"
        env_file = ".env"
        env_file_encoding = "utf-8"
        extra = "ignore"


# Global settings instance
settings = Settings()


class EvalOptions(BaseModel):
    """Scoring and split protocol"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(default=0, ge=0, description="patch seed for scored clouds")
    logistic: bool = False
    batch_size: int = Field(default=64, ge=1)
    train_fraction: float = Field(default=0.8, gt=0, lt=1)
    fractions: Tuple[float, ...] = (0.5, 0.7, 0.8)
    repeats: int = Field(default=5, ge=1)
    split_seed: int = Field(default=0, ge=0)

    @field_validator("fractions")
    @classmethod
    def _open_interval(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not value or any(not 0 < f < 1 for f in value):
            raise ValueError("every train fraction must lie strictly between 0 and 1")
        return value


class RunConfig(BaseModel):
    """Everything a run depends on; echoed next to every artifact"""
    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=())

    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalOptions = Field(default_factory=EvalOptions)

    @model_validator(mode="before")
    @classmethod
    def _grid_from_patch_size(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        model = data.get("model", {})
        sampling = data.get("sampling", {})
        if isinstance(sampling, SamplingConfig):
            points = sampling.points_per_patch
        elif isinstance(sampling, dict):
            points = sampling.get("points_per_patch", SamplingConfig().points_per_patch)
        else:
            return data
        if isinstance(model, dict) and "grid" not in model and isinstance(points, int) \
                and points > 0:
            data = {**data, "model": {**model, "grid": math.isqrt(points)}}
        return data

    @model_validator(mode="after")
    def _consistent_grid(self) -> "RunConfig":
        if self.model.grid != self.sampling.grid:
            raise ValueError(
                f"model grid {self.model.grid} does not match {self.sampling.points_per_patch} "
                f"points per patch (grid {self.sampling.grid})"
            )
        return self

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if value is None:
            continue
        if isinstance(value, Mapping) and isinstance(merged.get(key, {}), Mapping):
            merged[key] = _merge(merged.get(key, {}), value)
        else:
            merged[key] = value
    return merged


def read_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    return data


def load_run_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """
    Build a validated RunConfig from settings defaults, an optional YAML
    file and flag overrides (None values are ignored), in that order.

    Raises:
        ConfigError: unreadable file, unknown key or invalid value
    """
    data: Dict[str, Any] = {
        "train": {"validation_fraction": settings.validation_fraction},
        "eval": {"seed": settings.eval_seed},
    }
    if path is not None:
        data = _merge(data, read_yaml(path))
    data = _merge(data, overrides or {})
    try:
        config = RunConfig(**data)
    except ValidationError as e:
        source = f"{path}: " if path is not None else ""
        raise ConfigError(f"{source}invalid configuration:\n{e}")
    except TypeError as e:
        raise ConfigError(f"invalid configuration: {e}")
    logger.debug(f"Run config: {config.echo()}")
    return config


def write_echo(config: RunConfig, path: Union[str, Path], **extra: Any):
    """Write the effective config (plus any extra fields) as JSON"""
    payload = {"config": config.echo(), **extra}
    Path(path).write_text(json.dumps(payload, indent=2, default=str))


def sidecar_path(artifact: Union[str, Path]) -> Path:
    artifact = Path(artifact)
    return artifact.with_name(artifact.name + ".json")
