"""
Configuration Module
Training hyperparameters, their defaults, and the run-level config layer
that merges a JSON config file with command-line flags.
"""

import json
import math
from dataclasses import dataclass, field, fields, replace, asdict
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError


# Defaults for every TrainConfig field
TRAIN_DEFAULTS = {
    'lr_linear': 0.005,
    'lr_nonlinear': 0.005,
    'batch_size': 1024,
    'warmstart_epochs': 5,
    'ao_max_iters': 20,
    'ao_epochs_per_block': 1,
    'max_epochs': 1000,
    'early_stop_rel_tol': 1e-4,
    'patience': 1,
    'max_restarts': 10,
    'seed': 0,
    'deterministic': True,
    'train_frac': 0.8,
    'val_frac': 0.1,
    'activation': 'relu',
    'optimizer': 'adam',
    'init': 'ao',
    'workers': 1,
    'adam_beta1': 0.9,
    'adam_beta2': 0.999,
    'adam_eps': 1e-8,
}

ACTIVATIONS = ('relu', 'identity')
OPTIMIZERS = ('adam', 'sgd')
INIT_STRATEGIES = ('ao', 'naive')

# Restart attempt k trains with seed + k * RESTART_SEED_STRIDE
RESTART_SEED_STRIDE = 1_000_003


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""
    lr_linear: float = TRAIN_DEFAULTS['lr_linear']
    lr_nonlinear: float = TRAIN_DEFAULTS['lr_nonlinear']
    batch_size: int = TRAIN_DEFAULTS['batch_size']
    warmstart_epochs: int = TRAIN_DEFAULTS['warmstart_epochs']
    ao_max_iters: int = TRAIN_DEFAULTS['ao_max_iters']
    ao_epochs_per_block: int = TRAIN_DEFAULTS['ao_epochs_per_block']
    max_epochs: int = TRAIN_DEFAULTS['max_epochs']
    early_stop_rel_tol: float = TRAIN_DEFAULTS['early_stop_rel_tol']
    patience: int = TRAIN_DEFAULTS['patience']
    max_restarts: int = TRAIN_DEFAULTS['max_restarts']
    seed: int = TRAIN_DEFAULTS['seed']
    deterministic: bool = TRAIN_DEFAULTS['deterministic']
    train_frac: float = TRAIN_DEFAULTS['train_frac']
    val_frac: float = TRAIN_DEFAULTS['val_frac']
    activation: str = TRAIN_DEFAULTS['activation']
    optimizer: str = TRAIN_DEFAULTS['optimizer']
    init: str = TRAIN_DEFAULTS['init']
    workers: int = TRAIN_DEFAULTS['workers']
    adam_beta1: float = TRAIN_DEFAULTS['adam_beta1']
    adam_beta2: float = TRAIN_DEFAULTS['adam_beta2']
    adam_eps: float = TRAIN_DEFAULTS['adam_eps']

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """
        Check every field against its allowed range.

        Raises:
            ConfigError: On the first invalid value.
        """
        for name in ('lr_linear', 'lr_nonlinear', 'early_stop_rel_tol'):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {value!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ('warmstart_epochs', 'ao_max_iters', 'ao_epochs_per_block',
                     'max_epochs', 'max_restarts'):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not 0 < self.train_frac < 1:
            raise ConfigError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if not 0 <= self.val_frac < 1:
            raise ConfigError(f"val_frac must lie in [0, 1), got {self.val_frac}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps must be positive, got {self.adam_eps}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.init not in INIT_STRATEGIES:
            raise ConfigError(f"init must be one of {INIT_STRATEGIES}, got {self.init!r}")

    def with_seed(self, seed: int) -> 'TrainConfig':
        return replace(self, seed=seed)

    def attempt_seed(self, attempt: int) -> int:
        """Seed used by restart attempt ``attempt`` (0 is the first run)."""
        return self.seed + attempt * RESTART_SEED_STRIDE

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> 'TrainConfig':
        """
        Build a config from a mapping with snake_case or kebab-case keys.

        Raises:
            ConfigError: On unknown keys or invalid values.
        """
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            name = key.replace('-', '_')
            if name not in known:
                raise ConfigError(f"Unknown training option: {key}")
            kwargs[name] = value
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from e


@dataclass
class RunConfig:
    """Command parameters merged from an optional JSON file and explicit flags."""
    command: str
    values: dict[str, Any] = field(default_factory=dict)

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key.replace('-', '_'), default)

    def train_config(self) -> TrainConfig:
        """
        Extract and validate the TrainConfig part of the run parameters.

        ``lr`` sets both learning rates unless ``lr_linear`` or
        ``lr_nonlinear`` is given explicitly.
        """
        known = {f.name for f in fields(TrainConfig)}
        values = {k: v for k, v in _expand_lr(self.values).items() if k in known}
        return TrainConfig.from_mapping(values)

    @classmethod
    def build(
        cls,
        command: str,
        flags: dict[str, Any],
        config_path: Optional[str] = None
    ) -> 'RunConfig':
        """
        Overlay explicitly given flags (non-None values) on the config file.

        Within each source ``lr`` expands to ``lr_linear`` and ``lr_nonlinear``
        unless that source names them itself, so a flag ``--lr`` also
        replaces per-block rates read from the file.

        Args:
            command: Subcommand name.
            flags: Parsed flag values; None means "not given".
            config_path: Optional JSON file with kebab-case keys.

        Returns:
            Merged RunConfig.

        Raises:
            ConfigError: If the file cannot be read or is not a JSON object.
        """
        file_values = load_config_file(config_path) if config_path else {}
        flag_values = {key.replace('-', '_'): value for key, value in flags.items() if value is not None}
        values: dict[str, Any] = {}
        for source in (file_values, flag_values):
            values.update(_expand_lr(source))
        return cls(command=command, values=values)


def _expand_lr(values: dict[str, Any]) -> dict[str, Any]:
    values = dict(values)
    lr = values.get('lr')
    if lr is not None:
        values.setdefault('lr_linear', lr)
        values.setdefault('lr_nonlinear', lr)
    return values


def load_config_file(path: str) -> dict[str, Any]:
    """Read a JSON config file and normalise its keys to snake_case."""
    try:
        data = json.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")
    return {str(k).replace('-', '_'): v for k, v in data.items()}
