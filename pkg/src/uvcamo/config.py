"""Pipeline configuration: one structured-text file (YAML or JSON) with sections.

Example::

    seed: 0
    out_dir: runs/desk
    grid:
      texgen_poses: 48
    efe:
      epochs: 20
    camo:
      beta: 0.0001
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import GridConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{k}: {msg}" for k, msg in self.errors))


@dataclass
class EFEConfig:
    channels: tuple = (16, 32, 64)
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 16
    weighted: bool = True
    cosine: bool = True
    test_colors: int = 16


@dataclass
class DetectorConfig:
    grid: int = 8
    channels: tuple = (16, 32, 64)
    learning_rate: float = 0.002
    epochs: int = 30
    batch_size: int = 32
    min_ap: float = 0.9
    textures_per_scene: int = 2


@dataclass
class CamoConfig:
    learning_rate: float = 0.01
    epochs: int = 5
    batch_size: int = 8
    alpha: float = 1.0
    beta: float = 0.0001
    loss: str = "all-boxes"
    texture_size: tuple = (64, 64)


@dataclass
class EvalConfig:
    nms_iou: float = 0.5
    conf_floor: float = 0.05
    benign_color: tuple = (1.0, 1.0, 1.0)
    random_seed: int = 12345


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/desk"
    mesh: str | None = None
    deterministic: bool = True
    grid: GridConfig = field(default_factory=GridConfig)
    efe: EFEConfig = field(default_factory=EFEConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    camo: CamoConfig = field(default_factory=CamoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        def conv(v):
            if dataclasses.is_dataclass(v):
                return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
            if isinstance(v, tuple):
                return [conv(x) for x in v]
            return v
        return conv(self)

    def hash(self) -> str:
        """Hash of everything that influences artifacts (the output path does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def image_size(self):
        return self.grid.image_size


_SECTIONS = {"grid": GridConfig, "efe": EFEConfig, "detector": DetectorConfig, "camo": CamoConfig,
             "eval": EvalConfig}


def config_from_dict(data: dict) -> PipelineConfig:
    errors = []
    data = dict(data or {})
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        errors.append(("version", f"unsupported config version {version}"))
    top = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top:
            errors.append((key, "unknown field"))
            continue
        if key in _SECTIONS:
            if not isinstance(value, dict):
                errors.append((key, "must be a mapping"))
                continue
            section_cls = _SECTIONS[key]
            names = {f.name: f for f in dataclasses.fields(section_cls)}
            sub = {}
            for k, v in value.items():
                if k not in names:
                    errors.append((f"{key}.{k}", "unknown field"))
                    continue
                sub[k] = tuple(v) if isinstance(v, list) else v
            try:
                kwargs[key] = section_cls(**sub)
            except (TypeError, ValueError) as err:
                errors.append((key, str(err)))
        else:
            kwargs[key] = value
    if errors:
        raise ConfigError(errors)
    cfg = PipelineConfig(**kwargs)
    errors.extend(validate(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def validate(cfg: PipelineConfig):
    errors = []
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        errors.append(("seed", "must be a non-negative integer"))
    h, w = cfg.grid.image_size
    if h <= 0 or w <= 0:
        errors.append(("grid.image_size", "must be positive"))
    elif h % cfg.detector.grid or w % cfg.detector.grid:
        errors.append(("detector.grid", f"must divide image size {cfg.grid.image_size}"))
    if not 0 < cfg.grid.fov < 180:
        errors.append(("grid.fov", "must lie in (0, 180)"))
    for name, section in (("efe", cfg.efe), ("detector", cfg.detector), ("camo", cfg.camo)):
        if not section.learning_rate > 0:
            errors.append((f"{name}.learning_rate", "must be > 0"))
        if section.epochs < 1:
            errors.append((f"{name}.epochs", "must be >= 1"))
        if section.batch_size < 1:
            errors.append((f"{name}.batch_size", "must be >= 1"))
    if cfg.camo.alpha < 0 or cfg.camo.beta < 0:
        errors.append(("camo.alpha/beta", "must be >= 0"))
    if cfg.camo.loss not in ("all-boxes", "center-cell"):
        errors.append(("camo.loss", "must be 'all-boxes' or 'center-cell'"))
    if cfg.mesh is not None and not Path(cfg.mesh).exists():
        errors.append(("mesh", f"file not found: {cfg.mesh}"))
    return errors


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError([("config", f"file not found: {path}")])
        text = path.read_text()
        try:
            data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as err:
            raise ConfigError([("config", f"parse error: {err}")]) from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError([("config", "top level must be a mapping")])
    data = dict(data or {})
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(data)
