"""
Configuration management for noisy EK-FAC runs.
Handles environment variables, the run configuration schema and flat
KEY=VALUE config files.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.utils.errors import ConfigError

# Load environment variables
load_dotenv(override=True)

OptimizerName = Literal["noisy-ekfac", "noisy-kfac", "ekfac", "kfac", "bbb"]
NOISY_OPTIMIZERS = ("noisy-ekfac", "noisy-kfac", "bbb")


class Config:
    """Process-level configuration read from the environment."""

    # Output Configuration
    OUTPUT_ROOT_VAR: str = "NOISY_EKFAC_OUTPUT_ROOT"

    # Logging Configuration
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE_NAME: str = os.getenv("LOG_FILE_NAME", "run.log")

    @classmethod
    def output_root(cls) -> Path:
        """Default root under which run directories are created."""
        return Path(os.getenv(cls.OUTPUT_ROOT_VAR, "runs"))

    @classmethod
    def validate(cls) -> bool:
        """Validate process configuration."""
        if not isinstance(logging.getLevelName(cls.LOG_LEVEL.upper()), int):
            raise ConfigError(f"LOG_LEVEL {cls.LOG_LEVEL!r} is not a logging level")
        return True


class TrainConfig(BaseModel):
    """Schema for a training or benchmark run. External names are used in files."""

    model_config = ConfigDict(populate_by_name=True, extra="forbid", frozen=True)

    optimizer: OptimizerName = "noisy-ekfac"
    alpha: float = Field(0.01, gt=0, le=1, description="Step size")
    beta: float = Field(0.001, gt=0, le=1, description="Kronecker factor EMA rate")
    omega: float = Field(0.01, gt=0, le=1, description="Re-scaling diagonal EMA rate")
    kl_weight: float = Field(..., alias="lambda", gt=0, description="KL weight lambda")
    eta: float = Field(1.0, gt=0, description="Prior variance")
    gamma_ex: float = Field(0.0, ge=0, description="Extrinsic damping")
    t_stats: int = Field(1, ge=1)
    t_scale: int = Field(1, ge=1)
    t_eig: int = Field(5, ge=1, description="Eigenbasis (or inverse) refresh interval")
    t_reinit: int = Field(50, ge=1, description="Re-initialize R with K-FAC eigenvalues")
    batch_size: int = Field(10, ge=1)
    epochs: int = Field(40, ge=1)
    max_iterations: Optional[int] = Field(None, ge=1)
    seed: int = Field(0, ge=0, le=2 ** 64 - 1)
    fisher_sampling: Literal["empirical", "model"] = "empirical"
    hidden_units: int = Field(50, ge=1)
    lr_decay: float = Field(0.1, gt=0, le=1, description="Factor applied to alpha in the second half")
    n_mc_eval: int = Field(100, ge=1)
    n_mc_elbo: int = Field(10, ge=1)
    noise_a0: float = Field(6.0, gt=0)
    noise_b0: float = Field(6.0, gt=0)
    bbb_init_log_sigma: float = Field(-3.0, ge=-10)

    dataset: str = "synthetic-mlp"
    delimiter: str = ","
    target_column: int = -1
    synthetic_size: int = Field(400, ge=20)
    synthetic_features: int = Field(8, ge=1)
    train_fraction: float = Field(0.9, gt=0, lt=1)
    repeats: int = Field(10, ge=1)
    optimizers: List[OptimizerName] = Field(default_factory=lambda: ["noisy-ekfac"])
    datasets: List[str] = Field(default_factory=lambda: ["synthetic-mlp"])

    @field_validator("optimizers", "datasets", mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @model_validator(mode="after")
    def _point_estimates_need_damping(self) -> "TrainConfig":
        if self.optimizer in ("ekfac", "kfac") and self.gamma_ex <= 0:
            raise ValueError(f"optimizer {self.optimizer} requires gamma_ex > 0")
        return self

    @property
    def is_bayesian(self) -> bool:
        return self.optimizer in NOISY_OPTIMIZERS

    def snapshot(self) -> Dict[str, Any]:
        """Resolved configuration keyed by external names."""
        return self.model_dump(by_alias=True, mode="json")

    def with_overrides(self, **changes: Any) -> "TrainConfig":
        """Re-validate a copy with some fields changed (external or field names)."""
        merged = {**self.snapshot(), **changes}
        if "kl_weight" in merged:
            merged["lambda"] = merged.pop("kl_weight")
        return validate_config(merged)


def _format_validation_error(err: ValidationError) -> str:
    parts = []
    for item in err.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<config>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def validate_config(values: Dict[str, Any]) -> TrainConfig:
    """
    Validate raw values against the TrainConfig schema.

    Raises:
        ConfigError: with one message per offending field
    """
    try:
        return TrainConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from e


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    """
    Parse repeated ``KEY=VALUE`` override strings.

    Raises:
        ConfigError: if an item has no '=' or an empty key
    """
    overrides: Dict[str, str] = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form KEY=VALUE")
        overrides[key.strip()] = value.strip()
    return overrides


def load_train_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> TrainConfig:
    """
    Resolve a TrainConfig: schema defaults < file < overrides.

    Args:
        path: flat KEY=VALUE config file, optional
        overrides: values taking precedence over the file

    Returns:
        Validated configuration

    Raises:
        ConfigError: if the file is missing or any field is invalid
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        values.update(
            {key: value for key, value in dotenv_values(path, interpolate=False).items() if value is not None}
        )
    values.update(overrides or {})
    return validate_config(values)


# Global configuration instance
config = Config()
