"""Run configuration: schema, defaults, file loading, and override precedence.

Configs are JSON objects with the keys documented in the README. A stored
snapshot (``to_dict``) resolves every default, so the snapshot plus the seed
fully determines a run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import TaskcommError
from .channel import DEFAULT_SYMBOL_RATE_BAUD, psnr_to_sigma2
from .models import DEFAULT_GAMMA0, TASKS, VARIANTS

PRIORS = ("log-uniform", "gaussian")
ESTIMATOR_MODES = ("known", "pilot", "blind")

DEFAULT_EPOCHS = {"mnist": 100, "cifar10": 150, "tiny-imagenet": 150}


class ConfigError(TaskcommError):
    """A configuration value is missing, unknown, or invalid."""


@dataclass
class ExperimentConfig:
    task: str = "mnist"
    variant: str = "vfe"
    n_initial: int = 64
    beta: float = 1e-3
    beta_grid: tuple | None = None
    psnr_db: float = 20.0
    psnr_range_db: tuple = (10.0, 25.0)
    gamma0: float | None = None
    noise_samples: int = 1
    batch_size: int = 128
    epochs: int | None = None
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int | None = None
    optimizer: str = "adam"
    seed: int = 0
    estimator_mode: str = "known"
    pilot_count: int = 8
    eval_trials: int = 10
    eval_psnr_grid: tuple | None = None
    train_subset: int | None = None
    bits_per_dim: int = 2
    prior: str = "log-uniform"
    baseline_jscc_n_grid: tuple | None = None
    baseline_quant_budget_ms: float | None = None
    symbol_rate_baud: float = DEFAULT_SYMBOL_RATE_BAUD
    data_root: str | None = None
    output_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    # -- resolved values -------------------------------------------------

    @property
    def resolved_gamma0(self) -> float:
        return DEFAULT_GAMMA0[self.task] if self.gamma0 is None else self.gamma0

    @property
    def resolved_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.task] if self.epochs is None else self.epochs

    @property
    def resolved_lr_decay_epoch(self) -> int:
        if self.lr_decay_epoch is not None:
            return self.lr_decay_epoch
        return max(1, (2 * self.resolved_epochs) // 3)

    @property
    def sigma2(self) -> float:
        return psnr_to_sigma2(self.psnr_db)

    @property
    def sigma2_range(self) -> tuple:
        low_psnr, high_psnr = self.psnr_range_db
        # high PSNR -> low variance
        return (psnr_to_sigma2(high_psnr), psnr_to_sigma2(low_psnr))

    # -- construction ----------------------------------------------------

    @classmethod
    def field_names(cls) -> tuple:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = cls.field_names()
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        coerced = {k: _coerce(k, v) for k, v in data.items()}
        try:
            return cls(**coerced)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must contain a JSON object")
        return cls.from_dict(raw)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """New config with values replaced; override wins over the file value."""
        if not overrides:
            return self
        data = self.to_dict(resolved=False)
        data.update(overrides)
        return type(self).from_dict(data)

    # -- serialization ---------------------------------------------------

    def to_dict(self, resolved: bool = True) -> dict:
        data = dataclasses.asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        if resolved:
            data["gamma0"] = self.resolved_gamma0
            data["epochs"] = self.resolved_epochs
            data["lr_decay_epoch"] = self.resolved_lr_decay_epoch
        return data

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(resolved=True), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        checks = [
            (self.task in TASKS, f"task must be one of {TASKS}, got {self.task!r}"),
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}, got {self.variant!r}"),
            (self.prior in PRIORS, f"prior must be one of {PRIORS}, got {self.prior!r}"),
            (
                self.estimator_mode in ESTIMATOR_MODES,
                f"estimator_mode must be one of {ESTIMATOR_MODES}, got {self.estimator_mode!r}",
            ),
            (self.n_initial >= 1, f"n_initial must be >= 1, got {self.n_initial}"),
            (self.beta >= 0, f"beta must be nonnegative, got {self.beta}"),
            (self.noise_samples >= 1, f"noise_samples must be >= 1, got {self.noise_samples}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.learning_rate > 0, f"learning_rate must be positive, got {self.learning_rate}"),
            (self.eval_trials >= 1, f"eval_trials must be >= 1, got {self.eval_trials}"),
            (self.bits_per_dim >= 1, f"bits_per_dim must be >= 1, got {self.bits_per_dim}"),
            (self.optimizer == "adam", f"only the adam optimizer is supported, got {self.optimizer!r}"),
            (self.symbol_rate_baud > 0, f"symbol_rate_baud must be positive, got {self.symbol_rate_baud}"),
        ]
        if self.epochs is not None:
            checks.append((self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}"))
        if self.gamma0 is not None:
            checks.append((self.gamma0 >= 0, f"gamma0 must be nonnegative, got {self.gamma0}"))
        if self.train_subset is not None:
            checks.append((self.train_subset >= 1, f"train_subset must be >= 1, got {self.train_subset}"))
        if self.estimator_mode == "pilot":
            checks.append((self.pilot_count >= 2, f"pilot estimation needs >= 2 pilots, got {self.pilot_count}"))
        low, high = self.psnr_range_db
        checks.append((low <= high, f"psnr_range_db must be (low, high), got {self.psnr_range_db}"))
        if self.beta_grid is not None:
            checks.append((len(self.beta_grid) >= 1, "beta_grid must be nonempty"))
            checks.append((all(b >= 0 for b in self.beta_grid), "beta_grid values must be nonnegative"))
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


def _coerce(key: str, value):
    if isinstance(value, list):
        return tuple(value)
    return value
