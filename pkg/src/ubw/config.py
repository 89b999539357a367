"""Run configuration schema.

A run is described by one JSON document.  Unknown keys are rejected at every
level; omitted fields take the desk-scale defaults below.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import container
from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SynthSource(_Strict):
    num_classes: int = Field(10, ge=2)
    per_class: int = Field(500, ge=1)
    test_per_class: int = Field(50, ge=1)
    image_size: int = Field(14, ge=4)
    channels: int = Field(1, ge=1)
    sigma: float = Field(0.25, ge=0)
    seed: int = 0


class DataConfig(_Strict):
    source: Literal["synth", "idx", "cifar-bin", "container"] = "synth"
    synth: SynthSource = SynthSource()
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    num_classes: Optional[int] = Field(None, ge=2)

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "idx":
            need = ("train_images", "train_labels", "test_images", "test_labels")
        elif self.source in ("cifar-bin", "container"):
            need = ("train_images", "test_images")
        else:
            need = ()
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"data source {self.source!r} needs {', '.join(missing)}")
        return self


class ArchConfig(_Strict):
    kind: Literal["cnn", "mlp"] = "cnn"
    conv_channels: tuple[int, ...] = (16, 32)
    hidden: tuple[int, ...] = (128,)
    init_seed: int = 1


class TrainConfig(_Strict):
    lr: float = Field(0.05, gt=0)
    milestones: tuple[int, ...] = (30,)
    decay: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(40, ge=0)
    seed: int = 0
    flip: bool = False


class TriggerConfig(_Strict):
    kind: Literal["patch", "blended"] = "patch"
    size: int = Field(4, ge=1)
    corner: Literal["bottom-right", "bottom-left", "top-right", "top-left"] = "bottom-right"
    pattern: Literal["checker", "inverse-checker", "white", "black"] = "checker"
    alpha: float = Field(0.1, ge=0, le=1)
    seed: int = 0


class UbwCConfig(_Strict):
    lam: float = Field(2.0, ge=0)
    rounds: int = Field(3, ge=1)
    lower_epochs: int = Field(10, ge=0)
    pga_steps: int = Field(20, ge=0)
    pga_step_size: float = Field(0.01, ge=0)
    epsilon: float = Field(16 / 255, gt=0)
    signed: bool = True
    source_class: int = Field(1, ge=1)
    selection: Literal["gradient-norm", "random"] = "gradient-norm"
    lower_init: Literal["warm", "scratch"] = "warm"
    source_batch: int = Field(0, ge=0)


class WatermarkConfig(_Strict):
    method: Literal["none", "ubw-p", "ubw-c", "badnets", "blended"] = "ubw-p"
    gamma: float = Field(0.1, gt=0, lt=1)
    target: int = Field(1, ge=1)
    seed: int = 0
    exclude_true_label: bool = False
    trigger: TriggerConfig = TriggerConfig()
    ubw_c: UbwCConfig = UbwCConfig()


class VerifyConfig(_Strict):
    tau: float = Field(0.25, ge=0, le=1)
    m: int = Field(100, ge=2)
    alpha: float = Field(0.01, gt=0, lt=1)
    seed: int = 0
    source_class: Optional[int] = Field(None, ge=1)


class FineTuneConfig(_Strict):
    fraction: float = Field(0.1, gt=0, le=1)
    epochs: int = Field(100, ge=0)
    lr: float = Field(0.1, ge=0)
    batch_size: int = Field(128, ge=1)
    weight_decay: float = Field(5e-4, ge=0)
    seed: int = 0
    frozen_depth: Optional[int] = Field(None, ge=0)


def _default_rates() -> tuple[float, ...]:
    return tuple(round(0.02 * i, 2) for i in range(50))


class PruneConfig(_Strict):
    rates: tuple[float, ...] = Field(default_factory=_default_rates)

    @field_validator("rates")
    @classmethod
    def _rates(cls, v):
        if not v:
            raise ValueError("pruning grid is empty")
        if any(not 0 <= r < 1 for r in v):
            raise ValueError("pruning rates must lie in [0, 1)")
        return tuple(sorted(v))


class DefenseConfig(_Strict):
    fine_tune: FineTuneConfig = FineTuneConfig()
    prune: PruneConfig = PruneConfig()


class RunConfig(_Strict):
    data: DataConfig = DataConfig()
    arch: ArchConfig = ArchConfig()
    train: TrainConfig = TrainConfig()
    watermark: WatermarkConfig = WatermarkConfig()
    verify: VerifyConfig = VerifyConfig()
    defense: DefenseConfig = DefenseConfig()
    output_dir: Optional[str] = None

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        return container.sha256_hex(container.canonical_json(self.resolved()))

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted-path overrides such as ``{"watermark.gamma": 0.05}``."""
        doc = self.resolved()
        for path, value in overrides.items():
            node = doc
            keys = path.split(".")
            for k in keys[:-1]:
                if not isinstance(node.get(k), dict):
                    raise ConfigError(f"unknown config path {path!r}")
                node = node[k]
            if keys[-1] not in node:
                raise ConfigError(f"unknown config path {path!r}")
            node[keys[-1]] = value
        return parse_config(doc)


def parse_config(doc: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(doc)
