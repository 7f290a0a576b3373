"""Run configuration: nested dataclasses, YAML round-trip, dotted overrides, hashing.

Defaults are the published recipe (ViT-S/8, 224/96 crops, lr 4e-6 -> 3e-6 over 400
epochs, teacher momentum 0.99).  ``RunConfig.toy()`` scales everything down so the
whole pipeline runs on a CPU in minutes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import ViTConfig
from .distillation import ScheduleSpec
from .errors import ConfigError
from .imaging import ImagingConfig
from .sampling import LABEL_KINDS, CropSpec
from .synthgen import CHANNELS, SyntheticSpec


@dataclass(frozen=True)
class SamplingConfig:
    weak_label: str = "compound"
    seed: int = 0
    crop: CropSpec = field(default_factory=CropSpec)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    seed: int = 0
    channels: tuple = CHANNELS
    include_controls: bool = False
    use_centering: bool = True
    checkpoint_every: int = 10
    deterministic: bool = True
    threads: int = 1


@dataclass(frozen=True)
class EmbedConfig:
    crop: int = 224
    batch_size: int = 256


@dataclass(frozen=True)
class TvnConfig:
    eps: float = 1e-6
    whiten: bool = True


@dataclass(frozen=True)
class EvalConfig:
    batch_rule: str = "exclude_batch"
    window: tuple = (50, 250)


@dataclass(frozen=True)
class RunConfig:
    run_id: str = "default"
    run_dir: str = "runs/default"
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    model: ViTConfig = field(default_factory=ViTConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    tvn: TvnConfig = field(default_factory=TvnConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.sampling.weak_label not in LABEL_KINDS:
            raise ConfigError(f"sampling.weak_label: {self.sampling.weak_label!r} not in {LABEL_KINDS}")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        unknown = set(self.train.channels) - set(CHANNELS)
        if unknown:
            raise ConfigError(f"train.channels: unknown channels {sorted(unknown)}")
        if self.sampling.crop.global_size % self.model.patch_size or self.sampling.crop.local_size % self.model.patch_size:
            raise ConfigError("sampling.crop sizes must be multiples of model.patch_size")

    @classmethod
    def full(cls, **kw):
        return cls(**kw)

    @classmethod
    def toy(cls, **kw):
        base = dict(
            run_id="toy",
            run_dir="runs/toy",
            data=SyntheticSpec(),
            imaging=ImagingConfig(filter_size=32.0, target=(80, 80)),
            sampling=SamplingConfig(crop=CropSpec(global_size=32, local_size=16)),
            model=ViTConfig.toy(),
            schedule=ScheduleSpec(total_epochs=60, warmup_epochs=10, lr_start=0.0,
                                  lr_peak=5e-4, lr_final=1e-4),
            train=TrainConfig(checkpoint_every=20),
            embed=EmbedConfig(crop=32),
        )
        base.update(kw)
        return cls(**base)

    @classmethod
    def preset(cls, name):
        if name == "full":
            return cls.full()
        if name == "toy":
            return cls.toy()
        raise ConfigError(f"unknown preset {name!r}")

    def to_dict(self):
        return _to_plain(dataclasses.asdict(self))

    def hash(self):
        """Hash of everything that affects results (``run_id``/``run_dir`` excluded)."""
        d = self.to_dict()
        d.pop("run_id")
        d.pop("run_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @property
    def path(self) -> Path:
        return Path(os.environ.get("WSDINO_RUN_DIR", self.run_dir))


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _compatible(current, value):
    if isinstance(current, bool):
        return isinstance(value, bool)
    if isinstance(current, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(current))


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(values: dict, preset="full") -> RunConfig:
    base = RunConfig.preset(preset).to_dict()
    merged = _merge(base, values or {})
    return _build_run(merged)


def _build_run(values):
    # nested dataclasses built bottom-up from plain dicts
    cfg = RunConfig()
    kwargs = {}
    for f in dataclasses.fields(RunConfig):
        value = values.get(f.name, getattr(cfg, f.name))
        current = getattr(cfg, f.name)
        if dataclasses.is_dataclass(current):
            kwargs[f.name] = _from_plain(type(current), value, f.name)
        else:
            kwargs[f.name] = value
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _from_plain(cls, value, where):
    if dataclasses.is_dataclass(value):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"unknown config key {where}.{sorted(unknown)[0]}")
    defaults = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for name, v in value.items():
        key = f"{where}.{name}"
        f = defaults[name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_plain(type(default), v, key)
        elif isinstance(default, tuple):
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{key}: expected a list, got {v!r}")
            kwargs[name] = tuple(v)
        elif default is not None and v is not None and not _compatible(default, v):
            raise ConfigError(f"{key}: expected {type(default).__name__}, got {v!r}")
        elif isinstance(default, float) and v is not None:
            kwargs[name] = float(v)
        else:
            kwargs[name] = v
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _scalar(value):
    # YAML 1.1 reads "1e-4" as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def parse_overrides(items) -> dict:
    """``["train.batch_size=8", "sampling.weak_label=moa"]`` -> nested dict (values YAML-parsed)."""
    out: dict = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _scalar(yaml.safe_load(raw))
    return out


def load_config(path=None, preset="full", overrides=()) -> RunConfig:
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values = yaml.safe_load(path.read_text()) or {}
        if not isinstance(values, dict):
            raise ConfigError("config file must contain a mapping")
        preset = values.pop("preset", preset)
    values = _merge(values, parse_overrides(overrides))
    return from_dict(values, preset)


def dump_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
