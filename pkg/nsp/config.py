"""
Configuration
Model hyper-parameters, training settings, dataset presets and process settings
"""

import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ConfigError, IoError

logger = logging.getLogger(__name__)


class NspConfig(BaseModel):
    """Hyper-parameters of the force model, the networks and the integrator.

    Defaults are the SDD column of the hyper-parameter table.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    # tau = a_tau * sigmoid(.) + b_tau, k_nj = a_k * sigmoid(.) + b_k
    a_tau: float = Field(1.0, gt=0)
    b_tau: float = Field(0.4, ge=0)
    a_k: float = Field(100.0, gt=0)
    b_k: float = Field(0.0, ge=0)

    omega: float = Field(math.pi / 3, gt=0, lt=math.pi, description="Sector half-angle (rad)")
    r_col: float = Field(100.0, gt=0, description="Neighbourhood radius (px)")
    r_env: float = Field(50.0, gt=0, description="View-field side (px)")
    sigma_goal: float = Field(4.0, gt=0)
    sigma_latent: float = Field(1.3, gt=0)
    lambda_weak: float = Field(0.2, ge=0, le=1)
    lambda_kl: float = Field(1.0, ge=0)
    dt: float = Field(0.4, gt=0, description="Seconds per frame")
    cvae_scale: float = Field(0.005, gt=0)

    # Constant overrides turn the model into a hand-tuned social force model
    fixed_tau: Optional[float] = Field(None, gt=0)
    fixed_k: Optional[float] = Field(None, ge=0)

    feature_scale: float = Field(0.01, gt=0)
    embed_dim: int = Field(16, ge=1)
    lstm_hidden: int = Field(32, ge=1)
    mlp_hidden: int = Field(64, ge=1)
    latent_dim: int = Field(16, ge=1)
    hidden_activation: Literal["relu", "tanh", "sigmoid", "identity"] = "relu"

    obs_len: int = Field(8, ge=2)
    pred_len: int = Field(12, ge=1)
    ultra_samples: int = Field(20, ge=1)
    goal_samples: int = Field(20, ge=1)
    collision_radius: float = Field(15.0, gt=0)

    @property
    def window_len(self) -> int:
        return self.obs_len + self.pred_len

    @property
    def last_index(self) -> int:
        """T: index of the goal frame"""
        return self.window_len - 1

    @property
    def first_step(self) -> int:
        """M: index of the last observed frame"""
        return self.obs_len - 1


# Columns of the hyper-parameter table; everything else uses NspConfig defaults
DATASET_PRESETS: Dict[str, Dict[str, Any]] = {
    "eth": {"b_tau": 0.1, "a_k": 50.0, "r_col": 75.0, "r_env": 50.0, "lambda_weak": 0.0},
    "hotel": {"b_tau": 0.1, "a_k": 50.0, "r_col": 75.0, "r_env": 50.0, "lambda_weak": 0.0},
    "univ": {"b_tau": 2.2, "a_k": 50.0, "r_col": 75.0, "r_env": 50.0, "lambda_weak": 0.0},
    "zara1": {"b_tau": 1.6, "a_k": 50.0, "r_col": 75.0, "r_env": 75.0, "lambda_weak": 0.0},
    "zara2": {"b_tau": 1.4, "a_k": 50.0, "r_col": 75.0, "r_env": 75.0, "lambda_weak": 0.0},
    "sdd": {"b_tau": 0.4, "a_k": 100.0, "r_col": 100.0, "r_env": 50.0, "lambda_weak": 0.2, "collision_radius": 15.0},
}


def preset(name: str, **overrides: Any) -> NspConfig:
    """Build the NspConfig of a named dataset, with optional overrides"""
    key = name.lower()
    if key not in DATASET_PRESETS:
        raise ConfigError(f"Unknown preset '{name}'; expected one of {sorted(DATASET_PRESETS)}")
    values = {**DATASET_PRESETS[key], **overrides}
    try:
        return NspConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


class Stage(str, Enum):
    """Progressive training stages"""

    GOAL_ONLY = "goal"
    ADD_REPULSION = "repulsion"
    CVAE_ONLY = "cvae"


class TrainConfig(BaseModel):
    """Optimizer and schedule settings"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    stage: Stage = Stage.GOAL_ONLY
    lr_force: float = Field(1e-4, gt=0, description="Stages 1-2 learning rate")
    lr_cvae: float = Field(1e-5, gt=0, description="Stage 3 learning rate")
    lr_decay: float = Field(1.0, gt=0, le=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    epochs: int = Field(50, ge=0)
    cvae_epochs: int = Field(50, ge=0)
    batch_size: int = Field(8, ge=1, description="Cohorts per optimizer step")
    cvae_batch_size: int = Field(256, ge=1)
    seed: int = 0
    k_env_init: float = Field(1.0, ge=0)
    window_stride: int = Field(20, ge=1)
    train_files: List[str] = Field(default_factory=list)
    test_files: List[str] = Field(default_factory=list)

    @field_validator("train_files", "test_files", mode="before")
    @classmethod
    def _split_file_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [part.strip() for part in value.split(",") if part.strip()]
        return value

    def learning_rate(self, stage: Stage) -> float:
        return self.lr_cvae if stage == Stage.CVAE_ONLY else self.lr_force


class NspSettings(BaseSettings):
    """Process-level settings read from NSP_* environment variables"""

    model_config = SettingsConfigDict(env_prefix="NSP_", extra="ignore")

    threads: int = Field(1, ge=1)
    log_level: str = "INFO"
    log_json: bool = False


def parse_config_text(text: str) -> Dict[str, str]:
    """Parse flat `key = value` lines; `#` starts a comment"""
    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {number}: empty key")
        values[key] = value
    return values


def build_configs(values: Dict[str, Any]) -> Tuple[NspConfig, TrainConfig]:
    """Route flat key/values to NspConfig and TrainConfig by field name"""
    values = dict(values)
    base: Dict[str, Any] = {}
    preset_name = values.pop("preset", None)
    if preset_name:
        if str(preset_name).lower() not in DATASET_PRESETS:
            raise ConfigError(f"Unknown preset '{preset_name}'")
        base.update(DATASET_PRESETS[str(preset_name).lower()])

    model_values: Dict[str, Any] = dict(base)
    train_values: Dict[str, Any] = {}
    for key, value in values.items():
        if key in NspConfig.model_fields:
            model_values[key] = None if str(value).lower() in ("none", "") else value
        elif key in TrainConfig.model_fields:
            train_values[key] = value
        else:
            raise ConfigError(f"Unknown config key '{key}'")

    try:
        return NspConfig(**model_values), TrainConfig(**train_values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config_file(path: str, overrides: Optional[Dict[str, Any]] = None) -> Tuple[NspConfig, TrainConfig]:
    """
    Load a config file; override values (e.g. CLI flags) win over file values

    Args:
        path: Path to the flat key/value file
        overrides: Values applied on top of the file

    Returns:
        Tuple of (NspConfig, TrainConfig)
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot read config '{path}': {e}") from e

    values: Dict[str, Any] = parse_config_text(text)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    nsp_cfg, train_cfg = build_configs(values)
    logger.info(f"Loaded config from {path}")
    return nsp_cfg, train_cfg
