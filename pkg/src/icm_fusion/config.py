"""Experiment configuration: a dataclass tree that round-trips through YAML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, replace

import yaml

from .fusion import METHODS, MergeSpec
from .metaloop import MetaConfig
from .toybase import ModelConfig, SuiteConfig

__all__ = [
    "ConfigError",
    "LoraSection",
    "TaskvecSection",
    "VaeSection",
    "FusionSection",
    "ExperimentConfig",
    "default_baselines",
]

TASKVEC_MODES = ("activation", "param_delta")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LoraSection:
    rank: int = 4
    alpha: float | None = None  # None means 2 * rank
    epochs: int = 40
    lr: float = 0.05
    batch_size: int = 32

    def __post_init__(self):
        if self.rank < 1 or self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("lora: rank, epochs, batch_size and lr must be positive")

    @property
    def effective_alpha(self) -> float:
        return 2.0 * self.rank if self.alpha is None else float(self.alpha)


@dataclass(frozen=True)
class TaskvecSection:
    mode: str = "activation"
    n_probe: int = 64

    def __post_init__(self):
        if self.mode not in TASKVEC_MODES:
            raise ConfigError(f"taskvec.mode must be one of {TASKVEC_MODES}")
        if self.n_probe < 1:
            raise ConfigError("taskvec.n_probe must be positive")


@dataclass(frozen=True)
class VaeSection:
    latent_dim: int = 8
    hidden: tuple[int, ...] = (128, 128)

    def __post_init__(self):
        if self.latent_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise ConfigError("vae: latent_dim and hidden widths must be positive")


def default_baselines(seed: int = 0) -> tuple[MergeSpec, ...]:
    return tuple(MergeSpec(m, seed=seed) for m in METHODS if m != "icm")


@dataclass(frozen=True)
class FusionSection:
    grid_step: float = 0.1
    baselines: tuple[MergeSpec, ...] = field(default_factory=default_baselines)

    def __post_init__(self):
        if not 0.0 < self.grid_step <= 0.5:
            raise ConfigError("fusion.grid_step must lie in (0, 0.5]")
        names = [b.method for b in self.baselines]
        if "icm" in names or len(set(names)) != len(names):
            raise ConfigError("fusion.baselines must list distinct training-free methods")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    precision: str = "f64"
    output_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    lora: LoraSection = field(default_factory=LoraSection)
    taskvec: TaskvecSection = field(default_factory=TaskvecSection)
    vae: VaeSection = field(default_factory=VaeSection)
    meta: MetaConfig = field(default_factory=MetaConfig)
    fusion: FusionSection = field(default_factory=FusionSection)

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        n_fused = self.suite.n_tasks + (1 if self.suite.long_tail_fraction else 0)
        if self.meta.batch_size > n_fused:
            raise ConfigError(f"meta.batch_size {self.meta.batch_size} exceeds the {n_fused} fused tasks")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Re-seed every stream: experiment, meta-training and stochastic baselines."""
        merges = tuple(replace(b, seed=seed) for b in self.fusion.baselines)
        return replace(self, seed=seed, meta=replace(self.meta, seed=seed),
                       fusion=replace(self.fusion, baselines=merges))

    # ---------------------------------------------------------------- text form

    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return _build(cls, d or {}, "")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_yaml(fh.read())

    def config_hash(self) -> str:
        """SHA-256 over everything except the output directory."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(x) for x in obj]
    return obj


def _build(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or 'config'}: expected a mapping")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
        kwargs = {k: _build(hints[k], v, f"{path}.{k}".lstrip(".")) for k, v in value.items()}
        return tp(**kwargs)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_build(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items")
        return tuple(_build(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")
