"""Run configuration: dataclasses plus a strict YAML loader.

Config files are human-readable key-value text (YAML, comments allowed).
Unknown or ill-typed keys fail fast with the offending key named, which the
CLI maps to exit code 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .adaptation import METHODS, AdaptConfig
from .data import CORRUPTION_KINDS, PerturbationSpec
from .selection import EmConfig

__all__ = [
    "ConfigError",
    "PathsConfig",
    "DataConfig",
    "StreamConfig",
    "SelectionConfig",
    "PretrainConfig",
    "SingleSampleConfig",
    "RunConfig",
    "load_config",
    "apply_overrides",
]


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending key."""


@dataclass(frozen=True)
class PathsConfig:
    checkpoint: str = "runs/model"
    selection: str = "runs/selection.json"
    metrics: str = "runs/metrics.csv"
    data: str = "runs/data"


@dataclass(frozen=True)
class DataConfig:
    classes: int = 4
    train: int = 4000
    val: int = 1000
    test_pool: int = 4000
    seed: int = 77


@dataclass(frozen=True)
class StreamConfig:
    setting: str = "gradual"
    kinds: tuple[str, ...] = CORRUPTION_KINDS
    batches_per_segment: int = 20
    batch_size: int = 64


@dataclass(frozen=True)
class SelectionConfig:
    subset: int = 1280
    lr: float = 1e-3
    batch_size: int = 64
    passes: int = 1
    seed: int = 7
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)

    def em_config(self) -> EmConfig:
        return EmConfig(lr=self.lr, batch_size=self.batch_size, passes=self.passes)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 5


@dataclass(frozen=True)
class SingleSampleConfig:
    buffer: int = 64
    freq: float = 1.0  # updates happen every round(buffer / freq) samples

    def __post_init__(self):
        if self.buffer < 1:
            raise ConfigError("single_sample.buffer must be >= 1")
        if self.freq <= 0:
            raise ConfigError("single_sample.freq must be > 0")


@dataclass
class RunConfig:
    run_id: str = "run"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    method: str = "dplot"
    gamma: float = 0.75
    record_timing: bool = False
    warmup_batches: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    single_sample: SingleSampleConfig = field(default_factory=SingleSampleConfig)
    ablation_variants: tuple[str, ...] = ("A", "B", "C", "D")

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: unknown method {self.method!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma: must lie in [0, 1]")


def _build(cls, raw: dict, ctx: str, casts: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"{ctx}: expected a mapping")
    unknown = set(raw) - set(casts)
    if unknown:
        raise ConfigError(f"{ctx}.{sorted(unknown)[0]}: unknown config key")
    kwargs = {}
    for key, value in raw.items():
        cast = casts[key]
        try:
            kwargs[key] = cast(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{ctx}.{key}: {e}") from e
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{ctx}: {e}") from e


def _int_tuple(v):
    if isinstance(v, int):
        return (int(v),)
    return tuple(int(x) for x in v)


def _str_tuple(v):
    if isinstance(v, str):
        return (v,)
    return tuple(str(x) for x in v)


def config_from_dict(raw: dict) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a mapping")
    raw = dict(raw)

    def section(name, cls, casts):
        sub = raw.pop(name, None)
        if sub is None:
            return cls()
        return _build(cls, sub, name, casts)

    paths = section(
        "paths",
        PathsConfig,
        {"checkpoint": str, "selection": str, "metrics": str, "data": str},
    )
    data = section(
        "data",
        DataConfig,
        {"classes": int, "train": int, "val": int, "test_pool": int, "seed": int},
    )
    adapt = section(
        "adapt",
        AdaptConfig,
        {
            "lr_entropy": float,
            "lr_consistency": float,
            "ema_decay": float,
            "ensemble": bool,
            "prediction_timing": str,
            "pseudo_label_menu": str,
            "pseudo_label_views": int,
        },
    )
    stream = section(
        "stream",
        StreamConfig,
        {
            "setting": str,
            "kinds": _str_tuple,
            "batches_per_segment": int,
            "batch_size": int,
        },
    )

    def _perturbation(v):
        if not isinstance(v, dict):
            raise ConfigError("selection.perturbation: expected a mapping")
        return _build(
            PerturbationSpec,
            v,
            "selection.perturbation",
            {"kind": str, "mean": float, "var": float, "factor": float},
        )

    selection = section(
        "selection",
        SelectionConfig,
        {
            "subset": int,
            "lr": float,
            "batch_size": int,
            "passes": int,
            "seed": int,
            "perturbation": _perturbation,
        },
    )
    pretrain = section(
        "pretrain",
        PretrainConfig,
        {"epochs": int, "batch_size": int, "lr": float, "seed": int},
    )
    single_sample = section(
        "single_sample",
        SingleSampleConfig,
        {"buffer": int, "freq": float},
    )

    top_casts = {
        "run_id": str,
        "seeds": _int_tuple,
        "method": str,
        "gamma": float,
        "record_timing": bool,
        "warmup_batches": int,
        "ablation_variants": _str_tuple,
    }
    unknown = set(raw) - set(top_casts)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown config key")
    kwargs = {}
    for key, value in raw.items():
        try:
            kwargs[key] = top_casts[key](value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: {e}") from e

    return RunConfig(
        paths=paths,
        data=data,
        adapt=adapt,
        stream=stream,
        selection=selection,
        pretrain=pretrain,
        single_sample=single_sample,
        **kwargs,
    )


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    return config_from_dict(raw)


def apply_overrides(
    cfg: RunConfig,
    seed: int | None = None,
    method: str | None = None,
    gamma: float | None = None,
    alpha: float | None = None,
    lr_entropy: float | None = None,
    lr_consistency: float | None = None,
    buffer: int | None = None,
    freq: float | None = None,
) -> RunConfig:
    """Targeted CLI overrides on top of a loaded config."""
    if seed is not None:
        cfg.seeds = (int(seed),)
    if method is not None:
        if method not in METHODS:
            raise ConfigError(f"method: unknown method {method!r}")
        cfg.method = method
    if gamma is not None:
        if not 0.0 <= gamma <= 1.0:
            raise ConfigError("gamma: must lie in [0, 1]")
        cfg.gamma = float(gamma)
    adapt_kw = {}
    if alpha is not None:
        adapt_kw["ema_decay"] = float(alpha)
    if lr_entropy is not None:
        adapt_kw["lr_entropy"] = float(lr_entropy)
    if lr_consistency is not None:
        adapt_kw["lr_consistency"] = float(lr_consistency)
    if adapt_kw:
        try:
            cfg.adapt = replace(cfg.adapt, **adapt_kw)
        except ValueError as e:
            raise ConfigError(f"adapt: {e}") from e
    ss_kw = {}
    if buffer is not None:
        ss_kw["buffer"] = int(buffer)
    if freq is not None:
        ss_kw["freq"] = float(freq)
    if ss_kw:
        cfg.single_sample = replace(cfg.single_sample, **ss_kw)
    return cfg
