"""Run configuration: nested dataclasses serialized as canonical YAML.

Every field has a default; unknown keys are rejected. ``dump_config`` writes
the canonical form (sorted keys), and ``parse_config(dump_config(c)) == c``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffusion import GuidanceConfig
from .model import FINETUNE_MODES
from .train import TrainConfig

OUT_ENV = "TIERDIFF_OUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaxonomySection:
    n_super: int = 11
    subs_per_super: int = 4


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "mixture"  # mixture | glyph
    dim: int = 2
    n_per_subclass: int = 500
    superclass_spread: float = 8.0
    subclass_spread: float = 1.0
    noise_scale: float = 0.5
    glyph_side: int = 16

    def __post_init__(self):
        if self.kind not in ("mixture", "glyph"):
            raise ValueError("dataset.kind must be 'mixture' or 'glyph'")


@dataclass(frozen=True)
class ScheduleSection:
    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class ModelSection:
    width: int = 128
    depth: int = 4
    d_embed: int = 64
    d_time: int = 64


@dataclass(frozen=True)
class GuidanceSection:
    mode: str = "fine"
    omega: float = 4.0
    steps: int = 250

    def __post_init__(self):
        GuidanceConfig(self.mode, self.omega)
        if self.steps < 1:
            raise ValueError("guidance.steps must be >= 1")

    def config(self) -> GuidanceConfig:
        return GuidanceConfig(self.mode, self.omega)


@dataclass(frozen=True)
class EvalSection:
    n_per_class: int = 200
    n_proj: int = 128
    max_pairs: int = 10_000
    seed: int = 1234


@dataclass(frozen=True)
class BenchSection:
    modes: tuple[str, ...] = ("full", "bitfit", "difffit_like", "finediffusion")
    seeds: tuple[int, ...] = (0, 1, 2)
    # label-drop rate for the CFG baselines (null row); finediffusion uses train.p_super
    baseline_p_null: float = 0.1

    def __post_init__(self):
        bad = [m for m in self.modes if m not in FINETUNE_MODES]
        if bad or not self.modes:
            raise ValueError(f"bench.modes must be drawn from {FINETUNE_MODES}")
        if not self.seeds:
            raise ValueError("bench.seeds must not be empty")


@dataclass(frozen=True)
class PathsSection:
    out_dir: str = ""  # empty -> $TIERDIFF_OUT or ./runs

    def resolve_out(self) -> Path:
        return Path(self.out_dir or os.environ.get(OUT_ENV, "runs"))


def _pretrain_default() -> TrainConfig:
    return TrainConfig(learning_rate=1e-3, iterations=4000, p_super=0.0, p_null=0.1,
                       mode="full", eval_every=1000)


def _finetune_default() -> TrainConfig:
    return TrainConfig(learning_rate=1e-3, iterations=3000, p_super=0.1, p_null=0.0,
                       mode="finediffusion", eval_every=1000)


@dataclass(frozen=True)
class RunConfig:
    taxonomy: TaxonomySection = field(default_factory=TaxonomySection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: TrainConfig = field(default_factory=_pretrain_default)
    train: TrainConfig = field(default_factory=_finetune_default)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, default, where: str):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(type(default), value, where, default)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if isinstance(default, bool) or default is None:
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _build(cls, data: dict, where: str = "", base=None):
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name in names:
        default = getattr(base, name)
        kwargs[name] = _coerce(data[name], default, f"{where}.{name}".lstrip(".")) if name in data else default
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where or 'config'}: {err}") from err


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"malformed YAML: {err}") from err
    if data is not None and not isinstance(data, dict):
        raise ConfigError("top level of the config must be a mapping")
    return config_from_dict(data)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config(text)
