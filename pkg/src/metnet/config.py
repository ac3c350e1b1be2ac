"""Run configuration: one JSON document shared by every subcommand.

Example::

    {
      "seed": 0,
      "profile": "desk",
      "ablation": "full",
      "dataset": "runs/data",
      "checkpoint": "runs/ckpt",
      "train": {"steps": 500, "batch": 4, "lr": 0.001},
      "generate": {"episodes": 40, "dynamics": {"flow_speed": 0.5}}
    }

``profile`` is a preset name or an explicit profile object. Paths are
resolved relative to the config file and must exist when loaded.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, field_validator

from .datagen import DynamicsConfig
from .profile import ABLATIONS, ModelProfile, ProfileError, ablation_profile, get_profile


class ConfigError(ValueError):
    """Configuration invalid; the message names the offending key path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TrainSection(_Strict):
    steps: PositiveInt = 500
    batch: PositiveInt = 4
    lr: PositiveFloat = 1e-3
    clip_norm: Optional[PositiveFloat] = 5.0
    anchor_stride_min: PositiveInt = 2


class GenerateSection(_Strict):
    episodes: PositiveInt = 20
    split_pattern: tuple[PositiveInt, PositiveInt, PositiveInt] = (16, 2, 2)
    dynamics: dict[str, Any] = Field(default_factory=dict)

    @field_validator("dynamics")
    @classmethod
    def _check_dynamics(cls, v):
        DynamicsConfig.from_dict(v)
        return v


class EvalSection(_Strict):
    anchor_stride_min: PositiveInt = 6
    batch_size: PositiveInt = 16


class RunConfig(_Strict):
    seed: Optional[int] = None
    profile: Union[str, dict[str, Any]] = "desk"
    ablation: Literal[ABLATIONS] = "full"  # type: ignore[valid-type]
    dataset: Optional[Path] = None
    checkpoint: Optional[Path] = None
    train: TrainSection = TrainSection()
    generate: GenerateSection = GenerateSection()
    eval: EvalSection = EvalSection()

    @field_validator("profile")
    @classmethod
    def _check_profile(cls, v):
        if isinstance(v, str):
            get_profile(v)
        else:
            ModelProfile.from_dict(v)
        return v

    @property
    def base_profile(self) -> ModelProfile:
        return get_profile(self.profile) if isinstance(self.profile, str) else ModelProfile.from_dict(self.profile)

    @property
    def model_profile(self) -> ModelProfile:
        return ablation_profile(self.base_profile, self.ablation)

    @property
    def dynamics(self) -> DynamicsConfig:
        return DynamicsConfig.from_dict(self.generate.dynamics)

    def require(self, *keys: str) -> None:
        for key in keys:
            value = getattr(self, key)
            if value is None:
                raise ConfigError(f"{key}: required for this command")
            if isinstance(value, Path) and not value.exists():
                raise ConfigError(f"{key}: path does not exist: {value}")


def _format(err: ValidationError) -> str:
    first = err.errors()[0]
    path = ".".join(str(p) for p in first["loc"]) or "<root>"
    return f"{path}: {first['msg']}"


def load_config(path: Optional[Path], **overrides: Any) -> RunConfig:
    """Parse ``path`` (or an empty document), apply non-None overrides, validate."""
    raw: dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"--config: file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"<root>: expected a JSON object, got {type(raw).__name__}")
        base = path.parent
    for key in ("dataset", "checkpoint"):
        if isinstance(raw.get(key), str):
            raw[key] = str((base / raw[key]).resolve()) if not Path(raw[key]).is_absolute() else raw[key]
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None
    except (ProfileError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.seed is None:
        raise ConfigError("seed: required (pass --seed or set it in the config)")
    return cfg
