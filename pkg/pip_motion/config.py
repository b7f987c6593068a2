"""
Configuration settings for the interaction pipeline
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .models import AGENT_CLASSES, DYNAMIC_AGENT_CLASSES, MAP_CLASSES, GenConfig

logger = logging.getLogger(__name__)


class Config(BaseSettings):
    """Model, loss and evaluation settings"""

    # Geometry
    N_P: int = Field(10, ge=2, description="Points per map instance")
    N_MODE: int = Field(6, ge=1, description="Motion mode queries")
    T_F: int = Field(12, ge=1, description="Future steps at 2 Hz")
    STEP_SECONDS: float = Field(0.5, gt=0)
    HALF_RANGE: float = Field(51.2, gt=0, description="Half perception range (m)")

    # Network
    C: int = Field(256, ge=2, description="Hidden size")
    HEADS: int = Field(8, ge=1)
    PLAIN_BLOCKS: bool = False

    # Agent-wise filtering
    TAU: float = Field(0.5, ge=0.0, le=1.0, description="Map confidence threshold")
    MU: float = Field(20.5, gt=0, description="Map distance threshold (m)")

    # Ablation switches
    AGENT_NORMALIZATION: bool = True
    AGENT_FILTERING: bool = True
    MAP_INTERACTION: bool = True
    INTERACTION_PE: bool = True

    # Losses
    LOSS_WEIGHTS: Tuple[float, float, float, float, float] = (0.8, 0.1, 0.8, 0.4, 0.2)
    FOCAL_ALPHA: float = Field(0.25, ge=0.0, le=1.0)
    FOCAL_GAMMA: float = Field(2.0, ge=0.0)
    MATCH_CLS_WEIGHT: float = Field(1.0, ge=0.0)
    MATCH_GEO_WEIGHT: float = Field(1.0, ge=0.0)

    # Evaluation
    TAU_EPA: float = Field(2.0, gt=0, description="EPA hit/match threshold (m)")
    ALPHA: float = Field(0.5, ge=0.0, description="False positive penalty")
    SCORE_THRESHOLD: float = Field(0.3, ge=0.0, le=1.0)
    CHAMFER_THRESHOLD: float = Field(1.5, gt=0)
    DET_THRESHOLDS: Tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    EPA_MATCHING: Literal["greedy", "hungarian"] = "greedy"
    MOTION_EVAL_CLASSES: Tuple[int, ...] = DYNAMIC_AGENT_CLASSES

    # Execution
    N_JOBS: int = Field(1, ge=1)

    model_config = SettingsConfigDict(case_sensitive=True, extra="forbid", frozen=True)

    @classmethod
    def settings_customise_sources(
        cls, settings_cls, init_settings, env_settings, dotenv_settings, file_secret_settings
    ):
        # Explicit values and config files only; the environment is never read
        return (init_settings,)

    @field_validator("LOSS_WEIGHTS")
    @classmethod
    def validate_weights(cls, v):
        if any(w < 0 for w in v):
            raise ValueError("Loss weights must be non-negative")
        return v

    @field_validator("DET_THRESHOLDS")
    @classmethod
    def validate_det_thresholds(cls, v):
        if len(v) == 0 or any(t <= 0 for t in v):
            raise ValueError("Detection thresholds must be a non-empty list of positive distances")
        return v

    @model_validator(mode="after")
    def validate_shapes(self):
        if self.C % self.HEADS != 0:
            raise ValueError(f"C={self.C} is not divisible by HEADS={self.HEADS}")
        if self.C % 2 != 0:
            raise ValueError(f"C={self.C} must be even for the map subgraph layers")
        if self.N_MODE > self.C:
            raise ValueError(f"N_MODE={self.N_MODE} orthogonal mode queries need C >= N_MODE")
        return self

    def with_overrides(self, **overrides: Any) -> "Config":
        """Return a validated copy with some fields replaced"""
        return Config(**{**self.model_dump(), **overrides})

    @property
    def n_agent_classes(self) -> int:
        return len(AGENT_CLASSES)

    @property
    def n_map_classes(self) -> int:
        return len(MAP_CLASSES)


class TrainConfig(BaseModel):
    """Optimizer and training-loop settings"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(2000, ge=0)
    lr: float = Field(2e-4, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    seed: int = 0
    cosine_schedule: bool = False
    divergence_limit: float = Field(1e6, gt=0)
    log_every: int = Field(100, ge=1)


class RunConfig(BaseModel):
    """Sectioned run configuration as stored in config.json"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model: Config = Field(default_factory=Config)
    generator: GenConfig = Field(default_factory=GenConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.model_dump(mode="json"),
            "generator": self.generator.model_dump(mode="json"),
            "training": self.training.model_dump(mode="json"),
        }


def tiny_config(**overrides: Any) -> Config:
    """The tiny configuration used by gradient checks and toy training"""
    values = dict(N_P=4, N_MODE=2, C=8, HEADS=2, T_F=3)
    values.update(overrides)
    return Config(**values)


def load_config(config_path: Union[str, Path, None] = None) -> RunConfig:
    """Loads the sectioned configuration file (defaults when no path is given)."""
    if config_path is None:
        return RunConfig()
    try:
        with open(config_path, "r") as f:
            data = json.load(f)
    except FileNotFoundError:
        logger.error(f"Configuration file not found at {config_path}")
        raise
    except json.JSONDecodeError:
        logger.error(f"Failed to decode JSON from {config_path}")
        raise

    sections: Dict[str, Any] = {}
    if "model" in data:
        sections["model"] = Config(**data["model"])
    if "generator" in data:
        sections["generator"] = GenConfig(**data["generator"])
    if "training" in data:
        sections["training"] = TrainConfig(**data["training"])
    unknown: List[str] = sorted(set(data) - {"model", "generator", "training"})
    if unknown:
        logger.warning(f"Ignoring unknown config sections: {', '.join(unknown)}")
    logger.info(f"Configuration loaded from {config_path}")
    return RunConfig(**sections)
