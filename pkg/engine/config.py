"""Typed run configuration loaded from layered YAML documents."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .estimation import EstimationConfig
from .exploration import ExplorationConfig
from .facility import FacilitySpec
from .perception import PerceptionConfig
from .planner import PlannerConfig
from .scan_planning import PlanningConfig
from .trajectory import SimSettings, TrackerGains

PROFILES = ("desk", "full")


class ConfigError(ValueError):
    """Configuration document does not match the schema; ``messages`` names every offending key."""

    def __init__(self, messages: list[str]) -> None:
        super().__init__("; ".join(messages))
        self.messages = messages


class TrackingConfig(BaseModel):
    speeds: list[float] = Field(default_factory=lambda: [1.0, 1.75, 2.5])
    scan_speed: float = Field(0.5, gt=0)
    curve_radius: float = Field(3.0, gt=0)
    window: float = Field(1.0, gt=0)
    gains: TrackerGains = Field(default_factory=TrackerGains)
    sim: SimSettings = Field(default_factory=SimSettings)

    model_config = ConfigDict(extra="forbid")


class QualityConfig(BaseModel):
    s_dis: float = Field(0.8, gt=0, le=1)
    patch_size: int = Field(32, ge=8)
    image_size: int = Field(96, ge=8)
    mscn_c: float = Field(1e-3, gt=0)
    exposure: float = Field(0.004, ge=0)
    max_images: int = Field(24, ge=1)
    model_file: str = "niqe_model.json"

    model_config = ConfigDict(extra="forbid")


class PipelineConfig(BaseModel):
    profile: str = "desk"
    seed: int = 0
    odometry: Literal["truth", "eskf"] = "truth"
    facility: FacilitySpec = Field(default_factory=FacilitySpec)
    perception: PerceptionConfig = Field(default_factory=PerceptionConfig)
    planning: PlanningConfig = Field(default_factory=PlanningConfig)
    planner: PlannerConfig = Field(default_factory=PlannerConfig)
    exploration: ExplorationConfig = Field(default_factory=ExplorationConfig)
    estimation: EstimationConfig = Field(default_factory=EstimationConfig)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)
    quality: QualityConfig = Field(default_factory=QualityConfig)

    model_config = ConfigDict(extra="forbid")

    def scene(self) -> FacilitySpec:
        """Facility spec sampled with the run seed."""
        return self.facility.model_copy(update={"seed": self.seed})


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Mappings merge recursively; scalars and lists in ``override`` replace."""
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_document(path: Path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError([f"{path.name}: top level must be a mapping"])
    return data


def _describe(error: dict[str, Any]) -> str:
    dotted = ".".join(str(part) for part in error["loc"])
    if error["type"] == "extra_forbidden":
        return f"unknown key '{dotted}'"
    return f"invalid value for '{dotted}': {error['msg']}"


def parse_config(data: dict[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError([_describe(e) for e in exc.errors()]) from exc


def profile_path(data_dir: Path, profile: str) -> Path:
    return data_dir / "profiles" / f"{profile}.yaml"


def load_config(
    data_dir: Path,
    profile: str = "desk",
    *,
    config_path: Path | None = None,
    seed: int | None = None,
    odometry: str | None = None,
) -> PipelineConfig:
    """Profile document, then the user document, then command-line overrides.

    Missing files raise ``FileNotFoundError``, malformed YAML ``yaml.YAMLError`` and schema
    violations :class:`ConfigError`.
    """
    data = load_document(profile_path(data_dir, profile))
    if config_path is not None:
        data = deep_merge(data, load_document(config_path))
    data["profile"] = profile
    if seed is not None:
        data["seed"] = seed
    if odometry is not None:
        data["odometry"] = odometry
    return parse_config(data)


__all__ = [
    "PROFILES",
    "ConfigError",
    "PipelineConfig",
    "QualityConfig",
    "TrackingConfig",
    "deep_merge",
    "load_config",
    "load_document",
    "parse_config",
    "profile_path",
]
