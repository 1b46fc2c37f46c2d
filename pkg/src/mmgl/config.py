"""Hierarchical run configuration: {data, augmentation, model, losses, stages}.

Files may be TOML or YAML. Parsing is strict: any key that does not name
a known field fails with the offending dotted path, so a typo in a loss
weight cannot silently run with defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .augment import AugmentationConfig
from .data import VIEW_ALIASES, VIEWS
from .losses import ContrastiveConfig, LossWeights, normalize_portfolio
from .model import ModelConfig


class ConfigError(Exception):
    pass


def parse_views(spec) -> tuple[str, ...]:
    """Accept 't,c,s' style strings or lists of view names/aliases."""
    if isinstance(spec, str):
        parts = [p.strip() for p in spec.split(",") if p.strip()]
    else:
        parts = list(spec)
    views = []
    for p in parts:
        name = VIEW_ALIASES.get(p, p)
        if name not in VIEWS:
            raise ConfigError(f"unknown view {p!r}, expected one of {VIEWS} or t/c/s")
        if name not in views:
            views.append(name)
    if not views:
        raise ConfigError("at least one view required")
    return tuple(views)


@dataclass
class DataConfig:
    manifest: str | None = None
    labeled_fraction: float = 0.2
    views: tuple[str, ...] = VIEWS
    split_seed: int = 0
    drop_empty: bool = False

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        self.views = parse_views(self.views)


@dataclass
class GlobalStageConfig:
    epochs: int = 5
    batch_size: int = 8
    learning_rate: float = 1e-3
    slice_step: int = 1
    lr_schedule: str = "constant"


@dataclass
class LocalStageConfig:
    epochs: int = 5
    batch_size: int = 4
    learning_rate: float = 1e-3
    slice_step: int = 1
    freeze_encoder: bool = False
    lr_schedule: str = "constant"


@dataclass
class FinetuneStageConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-4
    slice_step: int = 1
    val_slice_step: int = 1
    augment: bool = True
    lr_schedule: str = "constant"
    head_lr: float | None = None


@dataclass
class StagesConfig:
    global_stage: GlobalStageConfig = field(default_factory=GlobalStageConfig)
    local_stage: LocalStageConfig = field(default_factory=LocalStageConfig)
    finetune_stage: FinetuneStageConfig = field(default_factory=FinetuneStageConfig)


@dataclass
class LossesConfig:
    temperature: float = 0.07
    denominator_mode: str = "standard"
    max_points_per_class: int = 512
    lambda_global: tuple = (0.2, 0.2, 0.6)
    lambda_local: tuple = (0.2, 0.2, 0.6)
    lambda_dice: tuple = (0.2, 0.2, 0.6)

    def __post_init__(self):
        self.lambda_global = tuple(self.lambda_global)
        self.lambda_local = tuple(self.lambda_local)
        self.lambda_dice = tuple(self.lambda_dice)
        # constructing the loss configs runs their validation
        self.contrastive()
        self.weights()

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(
            temperature=self.temperature,
            denominator_mode=self.denominator_mode,
            max_points_per_class=self.max_points_per_class,
        )

    def weights(self) -> LossWeights:
        return LossWeights(
            lambda_global=tuple(self.lambda_global),
            lambda_local=tuple(self.lambda_local),
            lambda_dice=tuple(self.lambda_dice),
        )


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossesConfig = field(default_factory=LossesConfig)
    stages: StagesConfig = field(default_factory=StagesConfig)


# file-level key -> StagesConfig attribute
_STAGE_KEYS = {"global": "global_stage", "local": "local_stage", "finetune": "finetune_stage"}


def _build(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected a table/mapping, got {type(payload).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"unknown config key: {path}.{key}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(payload: dict) -> Config:
    if not isinstance(payload, dict):
        raise ConfigError("top level of a config must be a mapping")
    known = {"data", "augmentation", "model", "losses", "stages"}
    for key in payload:
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")

    cfg = Config()
    if "data" in payload:
        cfg.data = _build(DataConfig, payload["data"], "data")
    if "augmentation" in payload:
        cfg.augmentation = _build(AugmentationConfig, payload["augmentation"], "augmentation")
    if "model" in payload:
        cfg.model = _build(ModelConfig, payload["model"], "model")
    if "losses" in payload:
        cfg.losses = _build(LossesConfig, payload["losses"], "losses")
    if "stages" in payload:
        stages_payload = payload["stages"]
        if not isinstance(stages_payload, dict):
            raise ConfigError("stages: expected a table/mapping")
        stage_classes = {
            "global": GlobalStageConfig,
            "local": LocalStageConfig,
            "finetune": FinetuneStageConfig,
        }
        stages = StagesConfig()
        for key, block in stages_payload.items():
            if key not in _STAGE_KEYS:
                raise ConfigError(f"unknown config key: stages.{key}")
            setattr(stages, _STAGE_KEYS[key], _build(stage_classes[key], block, f"stages.{key}"))
        cfg.stages = stages
    return cfg


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such config file: {path}")
    text = path.read_text()
    if path.suffix == ".toml":
        payload = tomllib.loads(text)
    elif path.suffix in (".yaml", ".yml"):
        payload = yaml.safe_load(text) or {}
    elif path.suffix == ".json":
        payload = json.loads(text)
    else:
        raise ConfigError(f"unsupported config format {path.suffix!r} (use .toml/.yaml/.json)")
    return config_from_dict(payload)


def resolved_dict(cfg: Config) -> dict:
    """The full effective configuration, defaults included, as plain data."""

    def plain(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        if isinstance(value, list):
            return [plain(v) for v in value]
        return value

    out = {
        "data": plain(cfg.data),
        "augmentation": plain(cfg.augmentation),
        "model": plain(cfg.model),
        "losses": plain(cfg.losses),
        "stages": {
            key: plain(getattr(cfg.stages, attr)) for key, attr in _STAGE_KEYS.items()
        },
    }
    return out


def save_resolved(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(resolved_dict(cfg), indent=2, sort_keys=True) + "\n")


def apply_dice_weights(cfg: Config, portfolio: str) -> Config:
    """Override the deep-supervision weight triple from an a:b:c string."""
    cfg.losses.lambda_dice = normalize_portfolio(portfolio)
    cfg.losses.weights()
    return cfg
