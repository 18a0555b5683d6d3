import json
import logging
import os
from dataclasses import MISSING, asdict, fields
from typing import Any, Dict, Mapping, Optional

from errors import ConfigError, SchemaVersionError
from eval_harness import EvalConfig
from oracle_planner import OracleConfig
from pastel_model import ModelConfig
from planar_env import EnvironmentSpec, load_environment
from stl_core import Formula, load_spec_file
from trainer import TrainConfig

logger = logging.getLogger(__name__)

CONFIG_FORMAT_VERSION = 1
DEFAULT_CONFIG_PATH = 'configs/config.json'
DEFAULT_SPEC_FILES = {'phi1': 'specs/phi1.stl', 'phi2': 'specs/phi2.stl', 'phi3': 'specs/phi3.stl'}

TOP_LEVEL_KEYS = frozenset({'format_version', 'environment_file', 'spec_files', 'dataset', 'oracle', 'model',
                            'train', 'eval', 'jobs'})
DATASET_DEFAULTS = {'path': 'runs/data/dataset.jsonl', 'per_spec_count': 1000, 'seed': 0}
# architecture knobs; regions, normalization and ablation come from the world and train.ablation
MODEL_KEYS = ('d_model', 'n_heads', 'n_layers', 'd_tok', 'ff_mult', 'h_max', 'dropout', 'seed')


class Config:
    """
    Run configuration for every subcommand.

    Values resolve with priority: override (CLI flag) > config file > default.
    Environment variables are not consulted.
    """

    def __init__(self, config_file_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None):
        self.config_file_path = config_file_path
        self.overrides: Dict[str, Any] = {k: v for k, v in (overrides or {}).items() if v is not None}

        self.environment_file: Optional[str]
        self.spec_files: Dict[str, str]
        self.dataset_path: str
        self.per_spec_count: int
        self.dataset_seed: int
        self.oracle: OracleConfig
        self.model: Dict[str, Any]
        self.train: TrainConfig
        self.eval: EvalConfig
        self.jobs: int

        self.load_config()

    def _read_file(self) -> dict:
        path = self.config_file_path
        if path is None:
            if not os.path.exists(DEFAULT_CONFIG_PATH):
                return {}
            path = DEFAULT_CONFIG_PATH
        elif not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            try:
                file_config = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(file_config, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if file_config.get('format_version') != CONFIG_FORMAT_VERSION:
            raise SchemaVersionError('config', file_config.get('format_version'), CONFIG_FORMAT_VERSION)
        unknown = set(file_config) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        logger.info(f"Loaded configuration from {path}")
        return file_config

    def load_config(self):
        """Resolve every section from overrides, the config file and defaults"""
        file_config = self._read_file()

        self.environment_file = self._get_config_value('environment_file', file_config.get('environment_file'))
        self.spec_files = dict(self._get_config_value('spec_files', file_config.get('spec_files'),
                                                      default=DEFAULT_SPEC_FILES))
        if not self.spec_files:
            raise ConfigError("spec_files must name at least one specification")

        dataset = self._section(file_config, 'dataset', DATASET_DEFAULTS.keys())
        self.dataset_path = self._get_config_value('dataset.path', dataset.get('path'), DATASET_DEFAULTS['path'])
        self.per_spec_count = int(self._get_config_value('dataset.per_spec_count', dataset.get('per_spec_count'),
                                                         DATASET_DEFAULTS['per_spec_count']))
        self.dataset_seed = int(self._get_config_value('dataset.seed', dataset.get('seed'), DATASET_DEFAULTS['seed']))
        if self.per_spec_count < 1:
            raise ConfigError(f"dataset.per_spec_count must be >= 1, got {self.per_spec_count}")

        self.oracle = self._build(file_config, 'oracle', OracleConfig)
        self.train = self._build(file_config, 'train', TrainConfig)
        self.eval = self._build(file_config, 'eval', EvalConfig)

        model = self._section(file_config, 'model', MODEL_KEYS)
        defaults = {f.name: f.default for f in fields(ModelConfig)}
        self.model = {key: self._get_config_value(f"model.{key}", model.get(key), defaults[key]) for key in MODEL_KEYS}

        self.jobs = int(self._get_config_value('jobs', file_config.get('jobs'), default=1))
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")

        unused = [key for key in self.overrides if not self._known_override(key)]
        if unused:
            raise ConfigError(f"unknown overrides: {sorted(unused)}")

    def _section(self, file_config: dict, name: str, allowed) -> dict:
        section = file_config.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        unknown = set(section) - set(allowed)
        if unknown:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
        return section

    def _build(self, file_config: dict, name: str, cls):
        names = [f.name for f in fields(cls)]
        section = self._section(file_config, name, names)
        values = {}
        for f in fields(cls):
            default = f.default if f.default is not MISSING else None
            values[f.name] = self._get_config_value(f"{name}.{f.name}", section.get(f.name), default)
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(f"invalid {name!r} section: {e}") from None

    def _known_override(self, key: str) -> bool:
        if key in ('environment_file', 'spec_files', 'jobs'):
            return True
        section, _, name = key.partition('.')
        known = {
            'dataset': DATASET_DEFAULTS.keys(),
            'model': MODEL_KEYS,
            'oracle': [f.name for f in fields(OracleConfig)],
            'train': [f.name for f in fields(TrainConfig)],
            'eval': [f.name for f in fields(EvalConfig)],
        }
        return name in known.get(section, ())

    def _get_config_value(self, key: str, file_value, default=None, required=False):
        """Get configuration value with priority: override > file > default"""
        value = self.overrides.get(key, file_value if file_value is not None else default)

        if required and value is None:
            raise ConfigError(f"Required configuration {key} is not set")

        return value

    def model_config(self, env: EnvironmentSpec) -> ModelConfig:
        return ModelConfig.for_environment(env, ablation=self.train.ablation, **self.model)

    def load_environment(self) -> EnvironmentSpec:
        return load_environment(self.environment_file)

    def load_specs(self) -> Dict[str, Formula]:
        """spec_id -> parsed formula, in config order"""
        return {spec_id: load_spec_file(path) for spec_id, path in self.spec_files.items()}

    def to_dict(self) -> dict:
        """Resolved configuration, in config-file shape, for manifests"""
        return {
            'format_version': CONFIG_FORMAT_VERSION,
            'environment_file': self.environment_file,
            'spec_files': dict(self.spec_files),
            'dataset': {'path': self.dataset_path, 'per_spec_count': self.per_spec_count, 'seed': self.dataset_seed},
            'oracle': _jsonable(asdict(self.oracle)),
            'model': dict(self.model),
            'train': _jsonable(asdict(self.train)),
            'eval': _jsonable(asdict(self.eval)),
            'jobs': self.jobs,
        }


def _jsonable(values: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}
