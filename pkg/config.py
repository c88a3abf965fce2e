"""
Configuration for SPECTRE experiments
"""
import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from modules.dataset import SplitSpec
from modules.lp_engine import SolverConfig
from modules.tuner import DEFAULT_LAMBDA_GRID, Strategy, TuneConfig
from utils.errors import ConfigError, InvalidArgumentError


@dataclass
class DataConfig:
    """Where the data comes from"""
    source: str = "toy"  # toy | csv
    path: Optional[str] = None
    n: int = 1000  # toy sample size
    label_column: str = "y"
    sensitive_columns: List[str] = field(default_factory=lambda: ["s"])
    exclude_columns: List[str] = field(default_factory=list)
    positive_label: Optional[str] = None  # label name used for EOp/DP, last label by default


@dataclass
class SplitConfig:
    test_fraction: float = 0.3
    val_fraction_of_train: float = 0.2
    seed: Optional[int] = None  # defaults to the global seed


@dataclass
class MapConfig:
    kind: str = "fourier"  # fourier | polynomial
    D: int = 600
    degree: int = 2
    seed: Optional[int] = None


@dataclass
class TuneSettings:
    sigma_values: Optional[List[float]] = None  # sigma grid from the training data when unset
    n_sigma: int = 10
    lambda_values: List[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    lambda0_init: float = 0.3
    strategy: str = "WCE"
    sigma_strategy: Optional[str] = None
    lambda_strategy: Optional[str] = None
    tolerance: float = 0.05
    top_n: int = 5


@dataclass
class SolverSettings:
    method: str = "subgradient"  # subgradient | lp
    max_iters: int = 20000
    step_constant: Optional[float] = None
    patience: int = 200
    tolerance: float = 1e-6
    restarts: int = 4
    strict: bool = False
    refine_max_dim: int = 24  # cutting-plane finish for small problems, 0 disables


@dataclass
class BoundsConfig:
    """
    Audit settings for the group and overall error bounds

    tau_source picks the moments of the bound uncertainty set. The default "audit"
    centers them on the audit subset, which keeps the empirical audit distribution
    inside the set. "train" centers them on the full training set, the set the
    model was trained against.
    """
    enabled: bool = True
    group_bounds: bool = True
    audit_fraction: float = 0.3
    lambda0_grid: List[float] = field(default_factory=lambda: [0.1, 0.5, 1.0, 5.0])
    sigma_grid: Optional[List[float]] = None
    retrain_sigma: bool = False
    tau_source: str = "audit"  # audit | train
    max_features: Optional[int] = 400
    min_group_size: int = 40
    extremal: bool = True


@dataclass
class ExperimentConfig:
    """Main configuration class"""

    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    map: MapConfig = field(default_factory=MapConfig)
    tune: TuneSettings = field(default_factory=TuneSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)

    output_dir: str = "output"
    seed: int = 0
    repeats: int = 1  # number of split seeds to average over
    max_workers: int = 1  # parallel candidate trainings and bound solves
    prediction_rule: str = "deterministic"  # deterministic | randomized
    decision_grid_resolution: int = 100
    write_lp: bool = False  # dump bound LPs in CPLEX LP format

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """Build from nested mappings; unknown keys are rejected"""
        return _build(cls, data or {}, prefix="")

    @classmethod
    def from_yaml(cls, path: str) -> "ExperimentConfig":
        """Create config from a YAML file"""
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Config file not found: {config_path}")
        try:
            data = yaml.safe_load(config_path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"Could not parse {config_path}: {e}")
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"Top level of {config_path} must be a mapping")
        config = cls.from_dict(data or {})
        if config.data.path and not Path(config.data.path).is_absolute():
            config.data.path = str((config_path.parent / config.data.path).resolve())
        return config

    def with_overrides(self, overrides: Dict[str, Any]) -> "ExperimentConfig":
        """
        Apply dotted-key overrides, e.g. {"tune.strategy": "ACC", "seed": 3}

        None values are skipped so unset CLI flags leave the file values alone.
        """
        merged = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = merged
            keys = dotted.split(".")
            for key in keys[:-1]:
                if not isinstance(node.get(key), dict):
                    raise ConfigError(f"Unknown config section '{key}' in override '{dotted}'")
                node = node[key]
            if keys[-1] not in node:
                raise ConfigError(f"Unknown config key '{dotted}'")
            node[keys[-1]] = value
        return ExperimentConfig.from_dict(merged)

    def apply_env(self) -> "ExperimentConfig":
        """Apply SPECTRE_OUTPUT_DIR, SPECTRE_MAX_WORKERS and SPECTRE_SEED when set"""
        overrides: Dict[str, Any] = {"output_dir": os.getenv("SPECTRE_OUTPUT_DIR")}
        try:
            if os.getenv("SPECTRE_MAX_WORKERS"):
                overrides["max_workers"] = int(os.getenv("SPECTRE_MAX_WORKERS"))
            if os.getenv("SPECTRE_SEED"):
                overrides["seed"] = int(os.getenv("SPECTRE_SEED"))
        except ValueError as e:
            raise ConfigError(f"Invalid integer in environment: {e}")
        return self.with_overrides(overrides)

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        """Raise ConfigError on the first invalid setting"""
        if self.data.source not in ("toy", "csv"):
            raise ConfigError(f"data.source must be 'toy' or 'csv', got '{self.data.source}'")
        if self.data.source == "csv":
            if not self.data.path:
                raise ConfigError("data.path is required when data.source is 'csv'")
            if check_paths and not Path(self.data.path).exists():
                raise ConfigError(f"Data file not found: {self.data.path}")
        if self.map.kind not in ("fourier", "polynomial"):
            raise ConfigError(f"map.kind must be 'fourier' or 'polynomial', got '{self.map.kind}'")
        if self.tune.sigma_values is not None and len(self.tune.sigma_values) == 0:
            raise ConfigError("tune.sigma_values is empty; remove it to use the default sigma grid")
        if not self.tune.lambda_values:
            raise ConfigError("tune.lambda_values must not be empty")
        if not self.bounds.lambda0_grid:
            raise ConfigError("bounds.lambda0_grid must not be empty")
        if not 0.0 < self.bounds.audit_fraction <= 1.0:
            raise ConfigError(f"bounds.audit_fraction must lie in (0, 1], got {self.bounds.audit_fraction}")
        if self.bounds.enabled and self.bounds.group_bounds and not self.data.sensitive_columns:
            raise ConfigError("bounds.group_bounds needs data.sensitive_columns; "
                              "set bounds.group_bounds: false for overall bounds only")
        if self.bounds.tau_source not in ("audit", "train"):
            raise ConfigError(f"bounds.tau_source must be 'audit' or 'train', got '{self.bounds.tau_source}'")
        if self.prediction_rule not in ("deterministic", "randomized"):
            raise ConfigError("prediction_rule must be 'deterministic' or 'randomized'")
        if self.repeats < 1 or self.max_workers < 1 or self.decision_grid_resolution < 2:
            raise ConfigError("repeats and max_workers must be >= 1, decision_grid_resolution >= 2")
        # surface errors of the runtime objects as config errors
        try:
            self.split_spec()
            self.tune_config()
        except InvalidArgumentError as e:
            raise ConfigError(str(e))
        return self

    @property
    def split_seed(self) -> int:
        return self.seed if self.split.seed is None else self.split.seed

    @property
    def map_seed(self) -> int:
        return self.seed if self.map.seed is None else self.map.seed

    def split_spec(self, seed: Optional[int] = None) -> SplitSpec:
        return SplitSpec(
            test_fraction=self.split.test_fraction,
            val_fraction_of_train=self.split.val_fraction_of_train,
            seed=self.split_seed if seed is None else seed,
        )

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            max_iters=self.solver.max_iters,
            step_constant=self.solver.step_constant,
            patience=self.solver.patience,
            tolerance=self.solver.tolerance,
            seed=self.seed,
            restarts=self.solver.restarts,
            method=self.solver.method,
            strict=self.solver.strict,
            refine_max_dim=self.solver.refine_max_dim,
        )

    def tune_config(self) -> TuneConfig:
        return TuneConfig(
            sigma_values=self.tune.sigma_values,
            lambda_values=list(self.tune.lambda_values),
            lambda0_init=self.tune.lambda0_init,
            strategy=Strategy.parse(self.tune.strategy),
            sigma_strategy=self.tune.sigma_strategy,
            lambda_strategy=self.tune.lambda_strategy,
            tolerance=self.tune.tolerance,
            top_n=self.tune.top_n,
            D=self.map.D,
            n_sigma=self.tune.n_sigma,
            seed=self.map_seed,
            max_workers=self.max_workers,
            solver=self.solver_config(),
            map_kind=self.map.kind,
            degree=self.map.degree,
        )

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(asdict(self))

    def fingerprint(self) -> str:
        """Short stable hash of the effective config, used as run id"""
        payload = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _build(cls, data: Dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"Config section '{prefix.rstrip('.') or 'root'}' must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown config key(s) {[prefix + k for k in unknown]}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value or {}, prefix=f"{prefix}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"Invalid config section '{prefix.rstrip('.') or 'root'}': {e}")
