"""Experiment configuration: one YAML file, every key optional.

An empty file reproduces the default setup.  Example::

    seed: 0
    noise_mode: noiseless
    paths: {records: data/mitdb, noise: data/nstdb/em}
    model: {embed_dim: 16, heads: 8}
    train: {epochs: 40}
    filters: {lowpass_cutoff_hz: 35.0}
    split: {ratios: [7, 1, 2], n_folds: 5}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .containers import config_hash
from .dataset import NOISE_MODES, SplitSpec
from .dsp import FilterSpec
from .model import ModelConfig
from .training import TrainConfig

_SECTIONS = {"seed", "noise_mode", "paths", "model", "train", "filters", "split", "exclude_records"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    noise_mode: str = "noiseless"
    paths: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    filters: FilterSpec = field(default_factory=FilterSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    exclude_records: tuple[str, ...] = ()

    def __post_init__(self):
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"]["ratios"] = list(self.split.ratios)
        d["exclude_records"] = list(self.exclude_records)
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - _SECTIONS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = int(d.get("seed", 0))
        noise_mode = d.get("noise_mode", "noiseless")
        try:
            model = ModelConfig(**_section(d, "model", ModelConfig))
            tr = {"seed": seed, "noise_mode": noise_mode, **_section(d, "train", TrainConfig)}
            if "use_rr" in tr and "use_rr" not in d.get("model", {}):
                model = ModelConfig(**{**model.to_dict(), "use_rr": bool(tr["use_rr"])})
            tr["use_rr"] = model.use_rr
            train = TrainConfig(**tr)
            filters = FilterSpec(**_section(d, "filters", FilterSpec))
            sp = _section(d, "split", SplitSpec)
            sp.setdefault("seed", seed)
            if "ratios" in sp:
                sp["ratios"] = tuple(int(r) for r in sp["ratios"])
            split = SplitSpec(**sp)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(seed, noise_mode, dict(d.get("paths") or {}), model, train, filters, split,
                   tuple(d.get("exclude_records") or ()))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in kw.items():
            if value is None:
                continue
            section, _, name = key.partition(".")
            if name:
                d[section][name] = value
            else:
                d[section] = value
        if "seed" in kw and kw["seed"] is not None:
            d["train"]["seed"] = kw["seed"]
            d["split"]["seed"] = kw["seed"]
        return ExperimentConfig.from_dict(d)


def _section(d: dict, key: str, cls) -> dict:
    sec = dict(d.get(key) or {})
    unknown = set(sec) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in {key}: {sorted(unknown)}")
    return sec


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(raw)
