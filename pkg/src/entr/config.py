"""Experiment configuration: TOML in, validated dataclasses out, TOML echo back.

See ``docs/config.md`` for the full key reference. Unknown keys are errors,
every default is materialized, and ``parse_config(echo_config(c)) == c``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigError
from .model import MIN_RESOLUTION, VARIANTS
from .regimes import REGIME_KINDS, PipelineConfig, RegimeConfig, build_curriculum, check_budget_parity
from .synthetic import SyntheticSpec

TIME_UNITS = ("mac", "wall")


@dataclass(frozen=True)
class SyntheticSection:
    num_classes: int = 3
    samples_per_class: int = 210
    base_resolution: int = 32
    noise: float = 0.08
    color_jitter: float = 0.15
    check_resolution: int = 12
    target_seed: int = 7
    source_seed: int = 1007

    def spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.num_classes, self.samples_per_class, self.base_resolution,
                             noise=self.noise, color_jitter=self.color_jitter,
                             check_resolution=self.check_resolution)


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"
    path: str = ""
    name: str = ""
    max_resolution: int = 32
    train_fraction: float = 0.9
    split_seed: int = 0
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)


@dataclass(frozen=True)
class BudgetSection:
    epochs: int = 8
    batch_size: int = 32
    stepwise_final_epochs: int = 2
    head_dropout: float = 0.5


@dataclass(frozen=True)
class RegimeOverride:
    size_fractions: list = field(default_factory=list)
    epochs_per_phase: list = field(default_factory=list)


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 6
    lr: float = 0.05
    source_path: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "entr"
    output: str = "runs/entr"
    models: list = field(default_factory=lambda: ["RN10"])
    regimes: list = field(default_factory=lambda: ["NoIncrease", "Gradual", "Stepwise"])
    seeds: list = field(default_factory=lambda: [0])
    time_unit: str = "mac"
    parallel: int = 1
    dataset: DatasetSection = field(default_factory=DatasetSection)
    budget: BudgetSection = field(default_factory=BudgetSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    regime_overrides: dict = field(default_factory=dict)

    def regime_config(self, kind: str, seed: int) -> RegimeConfig:
        o = self.regime_overrides.get(kind, RegimeOverride())
        return RegimeConfig(
            kind,
            max_resolution=self.dataset.max_resolution,
            size_fractions=tuple(o.size_fractions) or None,
            epochs=self.budget.epochs,
            epochs_per_phase=tuple(o.epochs_per_phase) or None,
            stepwise_final_epochs=self.budget.stepwise_final_epochs,
            batch_size=self.budget.batch_size,
            head_dropout=self.budget.head_dropout,
            seed=seed,
        )


# parsing

_NESTED = {
    "dataset": DatasetSection,
    "budget": BudgetSection,
    "pretrain": PretrainSection,
    "pipeline": PipelineConfig,
}


def _build(cls, table: dict, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")
        if cls is DatasetSection and key == "synthetic":
            value = _build(SyntheticSection, value, f"{where}.synthetic")
        elif key in _NESTED and not where:
            value = _build(_NESTED[key], value, key)
        kwargs[key] = _coerce(known[key], value, f"{where}.{key}" if where else key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where or 'experiment'}] {exc}") from None


def _coerce(f, value, where):
    default = f.default if f.default is not dataclasses.MISSING else (
        f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be an array")
    return value


def parse_config(source, check_paths: bool = True) -> ExperimentConfig:
    """Parse TOML text or a path to a TOML file into a validated ExperimentConfig."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and source.endswith(".toml")):
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        text = path.read_text()
    else:
        text = str(source)
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    top = dict(doc.pop("experiment", {}))
    overrides = doc.pop("regimes", {})
    for key in list(doc):
        if key not in _NESTED:
            raise ConfigError(f"unknown section [{key}]")
        top[key] = doc.pop(key)
    if not isinstance(overrides, dict):
        raise ConfigError("[regimes] must be a table of per-regime tables")
    parsed_overrides = {}
    for kind, table in overrides.items():
        if kind not in REGIME_KINDS:
            raise ConfigError(f"unknown regime section [regimes.{kind}]")
        parsed_overrides[kind] = _build(RegimeOverride, table, f"regimes.{kind}")
    if "regime_overrides" in top:
        raise ConfigError("unknown key regime_overrides")
    config = _build(ExperimentConfig, top, "")
    config = dataclasses.replace(config, regime_overrides=parsed_overrides)
    validate(config, check_paths)
    return config


def validate(config: ExperimentConfig, check_paths: bool = True) -> None:
    for m in config.models:
        if m not in VARIANTS:
            raise ConfigError(f"unknown model {m!r}; choose from {sorted(VARIANTS)}")
    for r in config.regimes:
        if r not in REGIME_KINDS:
            raise ConfigError(f"unknown regime {r!r}; choose from {REGIME_KINDS}")
    if not config.models or not config.regimes or not config.seeds:
        raise ConfigError("models, regimes and seeds must be non-empty")
    if len(set(config.models)) != len(config.models) or len(set(config.regimes)) != len(config.regimes):
        raise ConfigError("duplicate entries in models or regimes")
    if any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in config.seeds):
        raise ConfigError("seeds must be non-negative integers")
    if config.time_unit not in TIME_UNITS:
        raise ConfigError(f"time_unit must be one of {TIME_UNITS}")
    if config.parallel < 1:
        raise ConfigError("parallel must be at least 1")
    ds = config.dataset
    if ds.source not in ("synthetic", "folder"):
        raise ConfigError("dataset.source must be 'synthetic' or 'folder'")
    if not 0 < ds.train_fraction < 1:
        raise ConfigError("dataset.train_fraction must lie in (0, 1)")
    if ds.source == "synthetic":
        ds.synthetic.spec()
        if ds.synthetic.base_resolution < ds.max_resolution:
            raise ConfigError("dataset.synthetic.base_resolution must be >= dataset.max_resolution")
    if config.pretrain.epochs < 1:
        raise ConfigError("pretrain.epochs must be positive")
    # every regime must construct and all of them share one epoch budget
    regimes = [config.regime_config(kind, 0) for kind in REGIME_KINDS]
    check_budget_parity([r for r in regimes if r.kind in config.regimes])
    for r in regimes:
        if r.kind in config.regimes:
            build_curriculum(r, MIN_RESOLUTION)
    if check_paths:
        for label, p in (("dataset.path", ds.path if ds.source == "folder" else ""),
                         ("pretrain.source_path", config.pretrain.source_path)):
            if p and not Path(p).is_dir():
                raise ConfigError(f"{label} {p!r} does not exist")
        if ds.source == "folder" and not ds.path:
            raise ConfigError("dataset.path is required when dataset.source = 'folder'")


def to_dict(config: ExperimentConfig) -> dict:
    d = dataclasses.asdict(config)
    overrides = d.pop("regime_overrides")
    doc = {"experiment": {k: d[k] for k in ("name", "output", "models", "regimes", "seeds", "time_unit", "parallel")}}
    for key in _NESTED:
        doc[key] = d[key]
    if overrides:
        doc["regimes"] = overrides
    return doc


def echo_config(config: ExperimentConfig) -> str:
    """Full effective configuration as TOML, every default spelled out."""
    return tomli_w.dumps(to_dict(config))
