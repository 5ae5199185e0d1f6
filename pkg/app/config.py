"""
Configuration for the Inpatient2Vec system.
Paths, logging setup, named presets and the TOML run-configuration layer
(flags > config file > preset defaults).
"""
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from rich.logging import RichHandler

from services.corpus import FilterConfig
from services.errors import ConfigError, InputError
from services.model import ModelConfig
from services.synthetic import SyntheticSpec
from services.training import TrainConfig

# Project root directory
PROJECT_ROOT = Path(__file__).parent.parent

# Data directories
DATA_DIR = PROJECT_ROOT / "app" / "data"
RESULT_DIR = PROJECT_ROOT / "app" / "data_result"

# Environment
THREADS_ENV = "I2V_THREADS"
LOG_LEVEL_ENV = "I2V_LOG_LEVEL"

# Logging
LOG_LEVEL = "INFO"
LOG_FORMAT = "%(message)s"


def setup_logging(level: Optional[str] = None, verbose: bool = False) -> None:
    """Route all service loggers through a single RichHandler."""
    if verbose:
        level = "DEBUG"
    level = (level or os.environ.get(LOG_LEVEL_ENV) or LOG_LEVEL).upper()
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=verbose, show_path=verbose)],
        force=True,
    )


def evaluation_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}", THREADS_ENV) from e
    return max(1, threads)


@dataclass(frozen=True)
class SplitConfig:
    train: float = 0.75
    valid: float = 0.1
    test: float = 0.15

    @property
    def ratios(self) -> Tuple[float, float, float]:
        return (self.train, self.valid, self.test)


PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "desk": {
        "model": {"embed_dim": 64, "n_heads": 4, "n_layers": 2, "lstm_hidden": 64},
        "train": {"lr": 1e-3, "batch_size": 32, "epochs": 10,
                  "finetune_batch_size": 32, "finetune_optimizer": "adam", "finetune_lr": 1e-3},
        "filter": {"scale": 0.1},
    },
    "full": {
        "model": {"embed_dim": 384, "n_heads": 6, "n_layers": 6, "lstm_hidden": 200},
        "train": {"lr": 1e-4, "batch_size": 32, "epochs": 10,
                  "finetune_batch_size": 128, "finetune_optimizer": "adadelta", "finetune_lr": 1.0},
        "filter": {"scale": 1.0},
    },
}
DEFAULT_PRESET = "desk"

_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "synth": SyntheticSpec,
    "filter": FilterConfig,
    "split": SplitConfig,
}
_TOP_LEVEL = {"seed", "preset"}


@dataclass(frozen=True)
class RunConfig:
    preset: str = DEFAULT_PRESET
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    filter: FilterConfig = field(default_factory=FilterConfig)
    split: SplitConfig = field(default_factory=SplitConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        if self.filter.min_los < 1 or self.filter.max_los < self.filter.min_los:
            raise ConfigError("filter LOS bounds are inconsistent", "min_los")
        if self.filter.scale <= 0:
            raise ConfigError("filter.scale must be positive", "scale")
        if any(r < 0 for r in self.split.ratios) or abs(sum(self.split.ratios) - 1.0) > 1e-9:
            raise ConfigError("split ratios must be non-negative and sum to 1", "split")
        return self

    def to_dict(self) -> Dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            **{name: _as_dict(getattr(self, name)) for name in _SECTIONS},
        }


def _as_dict(obj) -> Dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _build_section(name: str, values: Mapping[str, Any]):
    cls = _SECTIONS[name]
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"Unknown key '{key}' in [{name}]", f"{name}.{key}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid [{name}] table: {e}", name) from e


def read_config_file(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"Config file not found: {path}")
    try:
        with path.open("rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}: {e}") from e
    for key, value in data.items():
        if key in _TOP_LEVEL:
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"Unknown table or key '{key}' in {path}", key)
        if not isinstance(value, dict):
            raise ConfigError(f"'{key}' must be a table", key)
    return data


def load_run_config(
    config_path=None,
    preset: Optional[str] = None,
    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """
    Resolve the run configuration.

    Args:
        config_path: Optional TOML file
        preset: Preset name (flag); falls back to the file's `preset`, then "desk"
        overrides: {section: {key: value}} from CLI flags; None values are ignored
        seed: Global seed flag

    Returns:
        Validated RunConfig
    """
    data = read_config_file(config_path) if config_path else {}
    preset = preset or data.get("preset") or DEFAULT_PRESET
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}' (choose from {sorted(PRESETS)})", "preset")

    merged: Dict[str, Dict[str, Any]] = {name: dict(PRESETS[preset].get(name, {})) for name in _SECTIONS}
    for name in _SECTIONS:
        merged[name].update(data.get(name, {}))
        for key, value in (overrides or {}).get(name, {}).items():
            if value is not None:
                merged[name][key] = value

    run_seed = seed if seed is not None else int(data.get("seed", 0))
    merged["train"].setdefault("seed", run_seed)
    merged["synth"].setdefault("seed", run_seed)
    if seed is not None:
        merged["train"]["seed"] = seed
        merged["synth"]["seed"] = seed

    sections = {name: _build_section(name, values) for name, values in merged.items()}
    return RunConfig(preset=preset, seed=run_seed, **sections).validate()


def with_train(run: RunConfig, **changes) -> RunConfig:
    return replace(run, train=replace(run.train, **changes))
