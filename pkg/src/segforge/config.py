"""Run configuration: one JSON document aggregating every sub-config."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Type, TypeVar

from .augment import AugmentConfig
from .data import SyntheticSpec
from .loss import LossConfig
from .train import TrainConfig
from .unet import SMOKE_SCALE, UNetConfig

C = TypeVar("C")


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data: str = "data"


@dataclass
class ReportConfig:
    inference_images: int = 6
    inference_repetitions: int = 5
    emit_plot_data: bool = False


@dataclass
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    unet: UNetConfig = field(default_factory=lambda: dataclasses.replace(SMOKE_SCALE))
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def validate(self) -> None:
        checks = [
            ("data", self.data.validate),
            ("augment", self.augment.validate),
            ("unet", self.unet.validate),
            ("loss", lambda: self.loss.validate(self.unet.num_classes)),
            ("train", self.train.validate),
        ]
        for section, check in checks:
            try:
                check()
            except ValueError as exc:
                raise ConfigError(f"{section}.{exc}") from exc
        if self.data.num_classes != self.unet.num_classes:
            raise ConfigError(
                f"unet.num_classes ({self.unet.num_classes}) must equal data classes + 1 ({self.data.num_classes})")
        if self.augment.output_size % 16:
            raise ConfigError("augment.output_size: must be divisible by 16 for the UNet")
        if self.report.inference_images < 1 or self.report.inference_repetitions < 1:
            raise ConfigError("report: inference_images and inference_repetitions must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def from_dict(cls: Type[C], doc: Mapping[str, Any], where: str = "") -> C:
    """Build dataclass ``cls`` from ``doc``; unknown keys are rejected."""
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(doc).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {where}{unknown[0]!s}")
    kwargs = {}
    for name, value in doc.items():
        ftype = fields[name].type
        sub = _dataclass_type(ftype)
        kwargs[name] = from_dict(sub, value, f"{where}{name}.") if sub else value
    return cls(**kwargs)


_SECTIONS = {
    "SyntheticSpec": SyntheticSpec, "AugmentConfig": AugmentConfig, "UNetConfig": UNetConfig,
    "LossConfig": LossConfig, "TrainConfig": TrainConfig, "PathsConfig": PathsConfig,
    "ReportConfig": ReportConfig,
}


def _dataclass_type(ftype):
    if isinstance(ftype, str):
        return _SECTIONS.get(ftype)
    return ftype if dataclasses.is_dataclass(ftype) else None


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = from_dict(RunConfig, doc)
    cfg.validate()
    return cfg


def run_config_from_meta(meta: Mapping[str, Any]) -> RunConfig:
    """Recover the run config stored in a checkpoint, or defaults around its UNet."""
    if "run" in meta:
        return from_dict(RunConfig, meta["run"])
    cfg = RunConfig()
    cfg.unet = from_dict(UNetConfig, meta["unet"])
    return cfg
