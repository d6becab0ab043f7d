"""Experiment configuration: nested dataclasses <-> YAML/JSON."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from ..labels import DEFAULT_ZETA
from ..net import BackboneConfig, HeadConfig
from ..synthdata import LIGHT_FOG, SceneConfig, ShiftParams

OUTPUT_ROOT_ENV = "SCFAM_OUTPUT_ROOT"
COMPONENTS = ("MDA", "SPM", "SBC", "ASM", "SCR")


@dataclass
class LabelingSection:
    zeta: float = DEFAULT_ZETA


@dataclass
class LossSection:
    lambda1: float = -1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    gamma: float = 5.0
    eps_clamp: float = 1e-7


@dataclass
class PoolingSection:
    pool_size: list = field(default_factory=lambda: [10, 10])


@dataclass
class Components:
    """MDA: the three gradient-reversed domain discriminators.
    SPM: semantic prediction heads. SBC: semantic bridge into the local/mid
    discriminators. ASM: semantic attention weighting of the pixel domain
    losses. SCR: semantic consistency regulariser."""

    MDA: bool = True
    SPM: bool = True
    SBC: bool = True
    ASM: bool = True
    SCR: bool = True

    def validate(self) -> None:
        for name in ("SBC", "ASM", "SCR"):
            if getattr(self, name) and not self.SPM:
                raise ValueError(f"component {name} requires SPM")
        for name in ("SBC", "ASM"):
            if getattr(self, name) and not self.MDA:
                raise ValueError(f"component {name} requires MDA")

    def label(self) -> str:
        on = [c for c in COMPONENTS if getattr(self, c)]
        return "+".join(on) if on else "source-only"


@dataclass
class OptimizerSection:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_steps: list = field(default_factory=lambda: [2000])
    lr_factor: float = 0.1
    # discriminators step faster than the backbone they push against
    disc_lr_mult: float = 10.0

    def lr_at(self, iteration: int) -> float:
        drops = sum(1 for s in self.lr_steps if iteration >= s)
        return self.lr * self.lr_factor**drops


@dataclass
class TrainingSection:
    iterations: int = 2500
    batch_source: int = 4
    batch_target: int = 4
    log_every: int = 250
    grl_scale: float = 1.0


@dataclass
class DataSection:
    scene: SceneConfig = field(default_factory=SceneConfig)
    shift: ShiftParams = field(default_factory=lambda: copy.deepcopy(LIGHT_FOG))
    n_source_train: int = 256
    n_target_train: int = 256
    n_val: int = 48
    source_dir: str | None = None
    target_dir: str | None = None
    source_val_dir: str | None = None
    target_val_dir: str | None = None


@dataclass
class ProbeSection:
    positions_per_image: int = 16
    hidden: int = 32
    epochs: int = 200
    lr: float = 0.01
    restarts: int = 3


@dataclass
class LoggingSection:
    record_wallclock: bool = False


@dataclass
class ExperimentConfig:
    name: str = "scfam"
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    labeling: LabelingSection = field(default_factory=LabelingSection)
    losses: LossSection = field(default_factory=LossSection)
    pooling: PoolingSection = field(default_factory=PoolingSection)
    components: Components = field(default_factory=Components)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    logging: LoggingSection = field(default_factory=LoggingSection)

    def validate(self) -> "ExperimentConfig":
        self.components.validate()
        if not 0 < self.labeling.zeta <= 1:
            raise ValueError(f"zeta must lie in (0, 1], got {self.labeling.zeta}")
        if self.heads.num_classes != self.data.scene.num_classes:
            raise ValueError("heads.num_classes and data.scene.num_classes disagree")
        if self.training.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if len(self.pooling.pool_size) != 2:
            raise ValueError("pooling.pool_size must be [H_a, W_a]")
        return self

    # -- (de)serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        d["data"]["scene"]["objects_range"] = list(self.data.scene.objects_range)
        d["data"]["scene"]["size_range"] = list(self.data.scene.size_range)
        d["data"]["shift"]["haze_color"] = list(self.data.shift.haze_color)
        d["data"]["shift"]["color_shift"] = list(self.data.shift.color_shift)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return _build(cls, d or {}).validate()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_yaml())

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(d, key, value)
        return ExperimentConfig.from_dict(d)


_NESTED = {
    "backbone": BackboneConfig,
    "heads": HeadConfig,
    "labeling": LabelingSection,
    "losses": LossSection,
    "pooling": PoolingSection,
    "components": Components,
    "optimizer": OptimizerSection,
    "training": TrainingSection,
    "data": DataSection,
    "probe": ProbeSection,
    "logging": LoggingSection,
    "scene": SceneConfig,
    "shift": ShiftParams,
}


def _build(cls, d: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in d.items():
        sub = _NESTED.get(key)
        if sub is not None and isinstance(value, dict) and sub is not BackboneConfig:
            kwargs[key] = _build(sub, value)
        elif sub is BackboneConfig and isinstance(value, dict):
            kwargs[key] = BackboneConfig(**value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    if isinstance(value, dict) and isinstance(d.get(parts[-1]), dict):
        d[parts[-1]].update(value)
    else:
        d[parts[-1]] = value


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    text = Path(path).read_text()
    d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return ExperimentConfig.from_dict(d)


def output_root(default: str | Path = "runs") -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, default))
