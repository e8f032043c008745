#!/usr/bin/env python3
"""
Configuration Loader for BootTOD Runs
Resolves the run configuration from dataclass defaults, a JSON file, environment
variables and command-line overrides, in that order (later sources win).
"""

import json
import os
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from src.boottod.dialogue_data import SamplerConfig
from src.boottod.downstream import FinetuneConfig
from src.boottod.encoder import EncoderConfig
from src.boottod.errors import ConfigError
from src.boottod.objective import AlignmentConfig
from src.boottod.synthetic import SyntheticConfig
from src.boottod.trainer import TrainConfig

logger = logging.getLogger(__name__)

ENV_CONFIG = "BOOTTOD_CONFIG"
ENV_SEED = "BOOTTOD_SEED"
ENV_DATA_DIR = "BOOTTOD_DATA_DIR"
ENV_OUTPUT_DIR = "BOOTTOD_OUTPUT_DIR"


@dataclass
class TrainSection:
    """Optimization settings from the `train` section"""
    lr: float = 3e-4
    batch_size: int = 16
    max_steps: int = 500
    eval_every: int = 50
    patience: int = 3
    mask_ratio: float = 0.15
    mask_scheme: str = "mask"
    lr_schedule: str = "constant"
    dev_batches: int = 8
    prefetch: bool = False
    show_progress: bool = False
    vocab_min_freq: int = 1
    storage_dtype: str = "float32"


@dataclass
class PathsConfig:
    """Where corpora, checkpoints and reports live"""
    data_dir: str = "data"
    output_dir: str = "runs"
    checkpoint: Optional[str] = None


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: FinetuneConfig = field(default_factory=FinetuneConfig)
    corpus: SyntheticConfig = field(default_factory=SyntheticConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def train_config(self, log_path: Optional[str] = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lr=t.lr, batch_size=t.batch_size, max_steps=t.max_steps, eval_every=t.eval_every,
            patience=t.patience, seed=self.seed, alignment=self.alignment,
            sampler=replace(self.sampler, seed=self.seed), mask_ratio=t.mask_ratio,
            mask_scheme=t.mask_scheme, lr_schedule=t.lr_schedule, dev_batches=t.dev_batches,
            prefetch=t.prefetch, log_path=log_path, show_progress=t.show_progress,
        )

    def finetune_config(self) -> FinetuneConfig:
        return replace(self.eval, seed=self.seed)


def _coerce(value: Any, current: Any, key: str) -> Any:
    """Bring JSON/env values to the type of the default they replace"""
    if isinstance(current, bool):
        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got '{value}'")
        return bool(value)
    try:
        if isinstance(current, int) and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{key}: expected an integer, got {value}")
            return int(value)
        if isinstance(current, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot convert {value!r} to {type(current).__name__}")
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def merge_section(section: Any, values: Mapping[str, Any], prefix: str) -> Any:
    """Return a copy of a dataclass section with `values` applied; unknown keys are errors"""
    if not isinstance(values, Mapping):
        raise ConfigError(f"{prefix}: expected an object, got {type(values).__name__}")
    known = {f.name for f in fields(section)}
    changes = {}
    for key, value in values.items():
        dotted = f"{prefix}.{key}"
        if key not in known:
            raise ConfigError(f"unknown configuration key '{dotted}'")
        current = getattr(section, key)
        if is_dataclass(current):
            changes[key] = merge_section(current, value, dotted)
        elif value is None:
            changes[key] = None
        else:
            changes[key] = _coerce(value, current, dotted)
    return replace(section, **changes)


def merge_tree(config: RunConfig, tree: Mapping[str, Any]) -> RunConfig:
    sections = {f.name for f in fields(RunConfig)}
    for key in tree:
        if key not in sections:
            raise ConfigError(f"unknown configuration section '{key}'")
    changes = {}
    for key, value in tree.items():
        current = getattr(config, key)
        changes[key] = merge_section(current, value, key) if is_dataclass(current) else _coerce(value, current, key)
    return replace(config, **changes)


def dotted_to_tree(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """{'alignment.k': 2, 'seed': 1} -> {'alignment': {'k': 2}, 'seed': 1}"""
    tree: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        node = tree
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return tree


class ConfigurationLoader:
    """Loads and manages the resolved run configuration"""

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                 environ: Optional[Mapping[str, str]] = None):
        self.environ = os.environ if environ is None else environ
        self.config_path = config_path or self.environ.get(ENV_CONFIG)
        self.overrides = dict(overrides or {})
        self._run_config: Optional[RunConfig] = None
        self._sources: list = []

    def load_all_configurations(self) -> bool:
        """Resolve defaults -> file -> environment -> overrides; raises ConfigError on bad input"""
        config = RunConfig()
        sources = ["defaults"]

        if self.config_path:
            config = merge_tree(config, self._read_file(self.config_path))
            sources.append(str(self.config_path))

        env_tree = self._environment_tree()
        if env_tree:
            config = merge_tree(config, env_tree)
            sources.append("environment")

        if self.overrides:
            config = merge_tree(config, dotted_to_tree(self.overrides))
            sources.append("flags")

        self._validate(config)
        self._run_config = config
        self._sources = sources
        logger.info(f"✅ Configuration resolved from {' -> '.join(sources)}")
        return True

    def _read_file(self, path: str) -> Dict[str, Any]:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} was not found")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return data

    def _environment_tree(self) -> Dict[str, Any]:
        tree: Dict[str, Any] = {}
        if self.environ.get(ENV_SEED):
            tree["seed"] = self.environ[ENV_SEED]
        paths = {}
        if self.environ.get(ENV_DATA_DIR):
            paths["data_dir"] = self.environ[ENV_DATA_DIR]
        if self.environ.get(ENV_OUTPUT_DIR):
            paths["output_dir"] = self.environ[ENV_OUTPUT_DIR]
        if paths:
            tree["paths"] = paths
        return tree

    @staticmethod
    def _validate(config: RunConfig):
        config.encoder.validate()
        config.sampler.validate()
        config.corpus.validate()
        config.eval.validate()
        config.train_config().validate(config.encoder.num_layers)
        if config.train.storage_dtype not in ("float32", "float64"):
            raise ConfigError(f"train.storage_dtype must be float32 or float64, got '{config.train.storage_dtype}'")

    @property
    def run_config(self) -> RunConfig:
        """Get the resolved run configuration"""
        if not self._run_config:
            raise ValueError("Run config not loaded. Call load_all_configurations() first.")
        return self._run_config

    @property
    def sources(self) -> list:
        return list(self._sources)

    def save_resolved(self, output_dir) -> Path:
        """Write resolved_config.json into an output directory"""
        path = Path(output_dir) / "resolved_config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.run_config.to_dict(), handle, indent=2, sort_keys=True)
        return path
