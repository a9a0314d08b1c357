"""Experiment configuration (YAML) with strict key checking."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .datagen import DatasetSpec, default_spacing, get_preset, preset_names
from .scheduler import STRATEGIES
from .tensor_core import PatchSpec, ScaleSpec, grid_shape


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetEntry:
    name: str
    scenario: str
    scale: tuple[int, int, int]
    n_samples: int = 512
    seed: int = 0
    carrier_spacing: float | None = None
    time_step: float | None = None


@dataclass(frozen=True)
class ScheduleConfig:
    strategy: str = "proposed"
    buckets: int = 4
    batch_size: int = 16
    epsilon_fraction: float = 0.5  # diversity threshold as a fraction of ln N
    enforce_diversity: bool = False


@dataclass(frozen=True)
class MaskConfig:
    random_ratio: float = 0.5
    time_observed_fraction: float = 0.5
    freq_observed_fraction: float = 0.5
    kind_weights: dict = field(default_factory=lambda: {"random": 1.0, "time": 1.0, "frequency": 1.0})


@dataclass(frozen=True)
class ModelSection:
    embed_dim: int = 32
    heads: int = 2
    encoder_depth: int = 2
    decoder_depth: int = 1
    mlp_ratio: int = 2
    max_grid: tuple[int, int, int] | None = None


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    learning_rate: float = 1e-3
    snr_db: float = 20.0


@dataclass(frozen=True)
class EvalConfig:
    tasks: tuple[str, ...] = ("reconstruction", "time", "frequency")
    splits: tuple[str, ...] = ("train", "test")
    max_samples: int = 64


@dataclass(frozen=True)
class StudyConfig:
    strategies: tuple[str, ...] = ("sequential", "alternating", "global", "proposed")
    bucket_values: tuple[int, ...] = (1, 2, 4, 8)
    train_steps: int | None = None
    conflict_pairs: int = 1000
    conflict_snapshot_steps: int = 300
    conflict_seeds: tuple[int, ...] = (0, 1, 2)
    conflict_mixed: str = "global"
    conflict_pairing: str = "same_length"
    conflict_batch_size: int | None = 4  # None: schedule.batch_size
    conflict_mask_kind: str | None = "random"  # None: per-batch draw from the mask policy


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple[DatasetEntry, ...]
    seed: int = 0
    patch: tuple[int, int, int] = (2, 2, 2)
    eval_datasets: tuple[DatasetEntry, ...] = ()
    schedule: ScheduleConfig = ScheduleConfig()
    masking: MaskConfig = MaskConfig()
    model: ModelSection = ModelSection()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    study: StudyConfig = StudyConfig()
    output_dir: str = "runs/default"

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(*self.patch)

    def dataset_specs(self, zero_shot: bool = False) -> list[DatasetSpec]:
        """Training datasets get ids 0..N-1; zero-shot datasets continue after them."""
        entries = self.eval_datasets if zero_shot else self.datasets
        offset = len(self.datasets) if zero_shot else 0
        names = preset_names()
        df, dt = default_spacing()
        out = []
        for i, e in enumerate(entries):
            out.append(DatasetSpec(
                scenario=get_preset(e.scenario),
                scale=ScaleSpec(*e.scale),
                n_samples=e.n_samples,
                seed=e.seed,
                carrier_spacing=e.carrier_spacing or df,
                time_step=e.time_step or dt,
                dataset_id=offset + i,
                scenario_id=names.index(e.scenario),
                name=e.name,
            ))
        return out

    def max_grid(self) -> tuple[int, int, int]:
        if self.model.max_grid is not None:
            return tuple(self.model.max_grid)
        grids = [grid_shape(ScaleSpec(*e.scale), self.patch_spec)
                 for e in self.datasets + self.eval_datasets]
        return tuple(max(g[i] for g in grids) for i in range(3))

    def epsilon(self) -> float:
        return self.schedule.epsilon_fraction * math.log(max(len(self.datasets), 1))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default
        if isinstance(value, list) and (isinstance(default, tuple) or name in ("scale", "patch", "max_grid")):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    try:
        datasets = tuple(_build(DatasetEntry, d, f"datasets[{i}]") for i, d in enumerate(data.pop("datasets")))
    except KeyError:
        raise ConfigError("config needs a 'datasets' list") from None
    eval_ds = tuple(_build(DatasetEntry, d, f"eval_datasets[{i}]")
                    for i, d in enumerate(data.pop("eval_datasets", None) or []))
    sections = {
        "schedule": ScheduleConfig, "masking": MaskConfig, "model": ModelSection,
        "train": TrainConfig, "eval": EvalConfig, "study": StudyConfig,
    }
    kwargs: dict[str, Any] = {"datasets": datasets, "eval_datasets": eval_ds}
    for key, cls in sections.items():
        if key in data:
            kwargs[key] = _build(cls, data.pop(key), key)
    for key in ("seed", "patch", "output_dir"):
        if key in data:
            v = data.pop(key)
            kwargs[key] = tuple(v) if key == "patch" else v
    if data:
        raise ConfigError(f"unknown top-level keys {sorted(data)}")
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if not cfg.datasets:
        raise ConfigError("at least one training dataset is required")
    names = [d.name for d in cfg.datasets + cfg.eval_datasets]
    if len(set(names)) != len(names):
        raise ConfigError("dataset names must be unique")
    known = set(preset_names())
    for d in cfg.datasets + cfg.eval_datasets:
        if d.scenario not in known:
            raise ConfigError(f"dataset {d.name}: unknown scenario {d.scenario!r}")
        if len(d.scale) != 3 or min(d.scale) < 1:
            raise ConfigError(f"dataset {d.name}: scale must be three positive ints")
        if d.n_samples < 8:
            raise ConfigError(f"dataset {d.name}: need at least 8 samples for the splits")
    s = cfg.schedule
    if s.strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {s.strategy!r}")
    if s.batch_size < 1 or s.buckets < 1:
        raise ConfigError("batch_size and buckets must be >= 1")
    m = cfg.masking
    if not 0 < m.random_ratio < 1:
        raise ConfigError("masking.random_ratio must lie in (0, 1)")
    for name in ("time_observed_fraction", "freq_observed_fraction"):
        if not 0 < getattr(m, name) <= 1:
            raise ConfigError(f"masking.{name} must lie in (0, 1]")
    if set(m.kind_weights) - {"random", "time", "frequency"} or sum(m.kind_weights.values()) <= 0:
        raise ConfigError("masking.kind_weights must weight random/time/frequency")
    st = cfg.study
    if st.conflict_mixed not in STRATEGIES:
        raise ConfigError(f"unknown study.conflict_mixed strategy {st.conflict_mixed!r}")
    if st.conflict_pairing not in ("same_length", "any"):
        raise ConfigError("study.conflict_pairing must be 'same_length' or 'any'")
    if st.conflict_mask_kind not in (None, "random", "time", "frequency"):
        raise ConfigError(f"unknown study.conflict_mask_kind {st.conflict_mask_kind!r}")
    if set(st.strategies) - set(STRATEGIES):
        raise ConfigError(f"unknown strategies in study.strategies: {sorted(set(st.strategies) - set(STRATEGIES))}")
    if any(b < 1 for b in st.bucket_values):
        raise ConfigError("study.bucket_values must be >= 1")
    if set(cfg.eval.tasks) - {"reconstruction", "time", "frequency"}:
        raise ConfigError(f"unknown eval tasks {sorted(set(cfg.eval.tasks) - {'reconstruction', 'time', 'frequency'})}")
    if set(cfg.eval.splits) - {"train", "val", "test"}:
        raise ConfigError("eval.splits must be drawn from train/val/test")
    if cfg.train.steps < 0:
        raise ConfigError("train.steps must be >= 0")
    try:
        PatchSpec(*cfg.patch)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"patch: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_dict(data)


def with_overrides(cfg: ExperimentConfig, seed=None, strategy=None, buckets=None, output_dir=None) -> ExperimentConfig:
    sched = cfg.schedule
    if strategy is not None:
        sched = dataclasses.replace(sched, strategy=strategy)
    if buckets is not None:
        sched = dataclasses.replace(sched, buckets=buckets)
    out = dataclasses.replace(
        cfg,
        schedule=sched,
        seed=cfg.seed if seed is None else seed,
        output_dir=cfg.output_dir if output_dir is None else str(output_dir),
    )
    validate(out)
    return out
