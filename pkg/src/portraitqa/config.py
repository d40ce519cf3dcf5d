"""Run configuration: nested dataclasses with strict YAML (de)serialization.

Unknown keys anywhere in the file are rejected, so a typo cannot silently
fall back to a default. The effective (defaults-merged) configuration is
echoed into every run directory and can be fed back in to reproduce the
run.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

SCHEMA_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class BranchFlags:
    use_full: bool = True
    use_facial: bool = True
    use_liqe: bool = True


@dataclass
class PreprocessSettings:
    resize_min_dim: int = 448
    crop_size: int = 384
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


@dataclass
class BackboneSettings:
    name: str = "toy"  # "toy" | "swin-b"
    feature_dim: int = 16
    full_weights: str | None = None    # path to a weights blob for the full branch
    facial_weights: str | None = None  # path to a weights blob for the facial branch
    full_source: str = "random"
    facial_source: str = "random"


@dataclass
class HeadSettings:
    hidden_dim: int = 128


@dataclass
class PromptProviderSettings:
    name: str = "stub"  # "stub" | "clip"
    embed_dim: int = 64
    logit_scale: float = 100.0
    model_id: str | None = None  # for the clip provider


@dataclass
class TrainConfig:
    """Everything a training run needs, including the evaluation setup."""

    schema_version: int = SCHEMA_VERSION
    attribute: str = "overall"
    manifest: str = ""
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = False
    epochs: int = 10
    batch_size: int = 12
    lr_initial: float = 1e-5
    lr_decay_factor: float = 10.0
    lr_decay_after_epochs: int = 2
    min_scene_size: int = 2
    branches: BranchFlags = field(default_factory=BranchFlags)
    preprocess: PreprocessSettings = field(default_factory=PreprocessSettings)
    backbone: BackboneSettings = field(default_factory=BackboneSettings)
    head: HeadSettings = field(default_factory=HeadSettings)
    prompt_provider: PromptProviderSettings = field(default_factory=PromptProviderSettings)

    def validate(self) -> "TrainConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version {self.schema_version} unsupported "
                f"(expected {SCHEMA_VERSION})")
        b = self.branches
        if not (b.use_full or b.use_facial or b.use_liqe):
            raise ConfigError("at least one branch flag must be true")
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.lr_initial <= 0:
            raise ConfigError("lr_initial must be positive")
        if self.lr_decay_factor < 1:
            raise ConfigError("lr_decay_factor must be >= 1")
        if self.lr_decay_after_epochs < 0:
            raise ConfigError("lr_decay_after_epochs must be >= 0")
        if self.preprocess.crop_size > self.preprocess.resize_min_dim:
            raise ConfigError("crop_size must not exceed resize_min_dim")
        if self.attribute not in ("overall", "exposure", "details"):
            raise ConfigError(f"unknown attribute {self.attribute!r}")
        if self.prompt_provider.name not in ("stub", "clip"):
            raise ConfigError(f"unknown prompt provider {self.prompt_provider.name!r}")
        return self


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _from_dict(hint, value, sub)
        elif name in ("mean", "std"):
            if not isinstance(value, (list, tuple)) or len(value) != 3:
                raise ConfigError(f"{sub}: expected 3 numbers")
            kwargs[name] = tuple(float(v) for v in value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> TrainConfig:
    return _from_dict(TrainConfig, data, "").validate()


def config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["preprocess"]["mean"] = list(d["preprocess"]["mean"])
    d["preprocess"]["std"] = list(d["preprocess"]["std"])
    return d


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}")
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(config_to_dict(cfg), sort_keys=True), encoding="utf-8")
