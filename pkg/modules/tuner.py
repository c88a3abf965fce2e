"""
Tuner Module
Two-stage demographics-blind search over sigma then lambda0
"""
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.dataset import Dataset
from modules.fairness_metrics import per_class_error
from modules.lp_engine import SolverConfig
from modules.mrc_core import MrcModel, train
from modules.spectral_map import DEFAULT_N_FREQUENCIES, FOURIER, POLYNOMIAL, SpectralMap, polynomial_map, sample_map, sigma_grid
from utils.errors import InvalidArgumentError, SolverError, SpectreError

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.geomspace(0.01, 1.0, 10))


class Strategy(str, Enum):
    ACC = "ACC"
    WCE = "WCE"
    WCE_T_A = "WCE_T_A"
    TOPN_WCE = "TOPN_WCE"

    @classmethod
    def parse(cls, value: str) -> "Strategy":
        if isinstance(value, cls):
            return value
        normalized = str(value).upper().replace("+", "_").replace("-", "_")
        aliases = {"TOPN": "TOPN_WCE", "TOP5_WCE": "TOPN_WCE", "WCETA": "WCE_T_A"}
        normalized = aliases.get(normalized, normalized)
        try:
            return cls(normalized)
        except ValueError:
            raise InvalidArgumentError(f"Unknown tuning strategy '{value}'; choose from {[s.value for s in cls]}")


@dataclass
class TuneConfig:
    """Grids and selection settings for the two-stage search"""
    sigma_values: Optional[List[float]] = None
    lambda_values: List[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    lambda0_init: float = 0.3
    strategy: Strategy = Strategy.WCE
    sigma_strategy: Optional[Strategy] = None
    lambda_strategy: Optional[Strategy] = None
    tolerance: float = 0.05
    top_n: int = 5
    D: int = DEFAULT_N_FREQUENCIES
    n_sigma: int = 10
    seed: int = 0
    max_workers: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)
    map_kind: str = FOURIER  # polynomial maps have no sigma, stage 1 is skipped
    degree: int = 2

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy)
        if self.sigma_strategy is not None:
            self.sigma_strategy = Strategy.parse(self.sigma_strategy)
        if self.lambda_strategy is not None:
            self.lambda_strategy = Strategy.parse(self.lambda_strategy)
        if self.sigma_values is not None:
            if not self.sigma_values or any(s <= 0 for s in self.sigma_values):
                raise InvalidArgumentError("sigma_values must be a non-empty list of positive values")
        if not self.lambda_values or any(v < 0 for v in self.lambda_values):
            raise InvalidArgumentError("lambda_values must be a non-empty list of non-negative values")
        if self.lambda0_init < 0:
            raise InvalidArgumentError(f"lambda0_init must be non-negative, got {self.lambda0_init}")
        if self.tolerance < 0:
            raise InvalidArgumentError(f"tolerance must be non-negative, got {self.tolerance}")
        if self.top_n < 1 or self.D < 1 or self.n_sigma < 2 or self.max_workers < 1:
            raise InvalidArgumentError("top_n, D and max_workers must be positive and n_sigma at least 2")
        if self.map_kind not in (FOURIER, POLYNOMIAL):
            raise InvalidArgumentError(f"Unknown map kind '{self.map_kind}'")
        if self.degree < 1:
            raise InvalidArgumentError(f"Polynomial degree must be at least 1, got {self.degree}")


@dataclass
class CandidateMetrics:
    """Validation metrics of one trained candidate"""
    stage: str
    index: int
    sigma: Optional[float]
    lambda0: float
    accuracy: float = float("nan")
    class_errors: List[float] = field(default_factory=list)
    worst_class_error: float = float("nan")
    worst_case_risk: float = float("nan")
    iterations: int = 0
    failed: bool = False
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "index": self.index,
            "sigma": self.sigma,
            "lambda0": self.lambda0,
            "accuracy": self.accuracy,
            "class_errors": list(self.class_errors),
            "worst_class_error": self.worst_class_error,
            "worst_case_risk": self.worst_case_risk,
            "iterations": self.iterations,
            "failed": self.failed,
            "error": self.error,
        }


@dataclass
class TuneResult:
    """Selected hyperparameters, the full grid table and the final model"""
    sigma_star: Optional[float]
    lambda0_star: float
    grid_records: List[CandidateMetrics]
    final_model: MrcModel
    sigma_values: List[float]
    lambda_values: List[float]

    @property
    def n_trainings(self) -> int:
        return len(self.grid_records)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sigma_star": self.sigma_star,
            "lambda0_star": self.lambda0_star,
            "sigma_values": list(self.sigma_values),
            "lambda_values": list(self.lambda_values),
            "grid_records": [r.to_dict() for r in self.grid_records],
            "final_model": self.final_model.to_dict(),
        }


def evaluate_candidate(model: MrcModel, val: Dataset) -> Dict[str, Any]:
    """
    Validation accuracy and per-class error of a candidate

    Classes absent from val are skipped. Sensitive ids are not read.
    """
    predictions = model.predict(val.features)
    errors = list(per_class_error(val.labels, predictions, model.map.n_classes).values())
    return {
        "accuracy": float(np.mean(predictions == val.labels)),
        "class_errors": errors,
        "worst_class_error": float(max(errors)),
    }


def select(records: Sequence[CandidateMetrics], strategy: Strategy,
           tolerance: float = 0.05, top_n: int = 5) -> int:
    """
    Position of the chosen record under a selection strategy

    Ties are broken by higher accuracy, then by lower candidate position.
    Failed records are never chosen.
    """
    strategy = Strategy.parse(strategy)
    usable = [(pos, r) for pos, r in enumerate(records) if not r.failed]
    if not usable:
        raise InvalidArgumentError("No successful candidates to select from")

    def by_accuracy(items):
        return min(items, key=lambda item: (-item[1].accuracy, item[0]))

    def by_worst_class_error(items):
        return min(items, key=lambda item: (item[1].worst_class_error, -item[1].accuracy, item[0]))

    if strategy is Strategy.ACC:
        return by_accuracy(usable)[0]
    if strategy is Strategy.WCE:
        return by_worst_class_error(usable)[0]
    if strategy is Strategy.WCE_T_A:
        threshold = min(r.worst_class_error for _, r in usable) + tolerance
        feasible = [item for item in usable if item[1].worst_class_error <= threshold + 1e-12]
        if not feasible:
            logger.warning("No candidate within the worst-class-error tolerance, falling back to WCE")
            return by_worst_class_error(usable)[0]
        return by_accuracy(feasible)[0]
    ranked = sorted(usable, key=lambda item: (-item[1].accuracy, item[0]))
    return by_worst_class_error(ranked[:top_n])[0]


def _describe(sigma: Optional[float], lambda0: float) -> str:
    if sigma is None:
        return f"lambda0={lambda0:.4g}"
    return f"sigma={sigma:.4g}, lambda0={lambda0:.4g}"


def _run_stage(stage: str, settings: List[Dict[str, Any]],
               fit: Callable[[Optional[float], float], MrcModel], val: Dataset,
               max_workers: int) -> Tuple[List[CandidateMetrics], List[Optional[MrcModel]]]:
    records: List[Optional[CandidateMetrics]] = [None] * len(settings)
    models: List[Optional[MrcModel]] = [None] * len(settings)

    def run_candidate(index: int):
        sigma, lambda0 = settings[index]["sigma"], settings[index]["lambda0"]
        model = fit(sigma, lambda0)
        return model, evaluate_candidate(model, val)

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {executor.submit(run_candidate, i): i for i in range(len(settings))}
        for future in as_completed(future_to_index):
            i = future_to_index[future]
            sigma, lambda0 = settings[i]["sigma"], settings[i]["lambda0"]
            try:
                model, metrics = future.result()
                models[i] = model
                records[i] = CandidateMetrics(
                    stage=stage, index=i, sigma=sigma, lambda0=lambda0,
                    accuracy=metrics["accuracy"],
                    class_errors=metrics["class_errors"],
                    worst_class_error=metrics["worst_class_error"],
                    worst_case_risk=model.worst_case_risk,
                    iterations=int(model.solver_meta.get("iterations", 0)),
                )
            except (SpectreError, np.linalg.LinAlgError) as e:
                logger.error(f"{stage} candidate {i} ({_describe(sigma, lambda0)}) failed: {e}")
                records[i] = CandidateMetrics(stage=stage, index=i, sigma=sigma, lambda0=lambda0,
                                              failed=True, error=str(e))

    for record in records:
        if not record.failed:
            logger.info(f"{stage} candidate {record.index}: {_describe(record.sigma, record.lambda0)}, "
                        f"acc={record.accuracy:.4f}, wce={record.worst_class_error:.4f}")
    return records, models


def build_map(cfg: TuneConfig, d: int, n_classes: int, sigma: Optional[float]) -> SpectralMap:
    """Feature map of one candidate; the frequency draw depends only on cfg.seed"""
    if cfg.map_kind == POLYNOMIAL:
        return polynomial_map(d, cfg.degree, n_classes)
    return sample_map(d, cfg.D, sigma, n_classes, cfg.seed)


def tune(train_ds: Dataset, val: Dataset, cfg: TuneConfig,
         on_stage_complete: Optional[Callable[[List[CandidateMetrics]], None]] = None) -> TuneResult:
    """
    Two-stage search: sigma at lambda0_init, then lambda0 at the chosen sigma

    Args:
        train_ds: Training data
        val: Validation data with at least 2 classes
        cfg: Grids, strategy and solver settings
        on_stage_complete: Called with all records so far after each stage

    Returns:
        TuneResult whose final model is the stage-2 model of the chosen lambda0
    """
    if val.n_samples == 0 or len(np.unique(val.labels)) < 2:
        raise InvalidArgumentError("Validation data must contain at least 2 classes", stage="tune")
    # blind to sensitive attributes from here on
    train_ds, val = train_ds.without_sensitive(), val.without_sensitive()

    n_classes = max(train_ds.n_classes, val.n_classes)

    def fit(sigma: Optional[float], lambda0: float) -> MrcModel:
        return train(train_ds, build_map(cfg, train_ds.n_features, n_classes, sigma), lambda0, cfg.solver)

    sigma_strategy = cfg.sigma_strategy or cfg.strategy
    lambda_strategy = cfg.lambda_strategy or cfg.strategy

    stage1: List[CandidateMetrics] = []
    sigma_values: List[float] = []
    sigma_star: Optional[float] = None
    if cfg.map_kind == FOURIER:
        sigma_values = list(cfg.sigma_values) if cfg.sigma_values else sigma_grid(train_ds, cfg.D, cfg.n_sigma)
        logger.info(f"Stage 1: {len(sigma_values)} sigma candidates at lambda0={cfg.lambda0_init}")
        stage1, _ = _run_stage("sigma", [{"sigma": float(s), "lambda0": cfg.lambda0_init} for s in sigma_values],
                               fit, val, cfg.max_workers)
        if on_stage_complete:
            on_stage_complete(list(stage1))
        if all(r.failed for r in stage1):
            raise SolverError("Every sigma candidate failed to train", stage="tune")
        sigma_star = float(sigma_values[select(stage1, sigma_strategy, cfg.tolerance, cfg.top_n)])
        logger.info(f"Selected sigma*={sigma_star:.6g} with strategy {sigma_strategy.value}")
    else:
        logger.info(f"Polynomial map of degree {cfg.degree}: no sigma stage")

    logger.info(f"Stage 2: {len(cfg.lambda_values)} lambda0 candidates"
                + (f" at sigma*={sigma_star:.6g}" if sigma_star is not None else ""))
    stage2, models = _run_stage("lambda0", [{"sigma": sigma_star, "lambda0": v} for v in cfg.lambda_values],
                                fit, val, cfg.max_workers)
    if on_stage_complete:
        on_stage_complete(list(stage1) + list(stage2))
    if all(r.failed for r in stage2):
        raise SolverError("Every lambda0 candidate failed to train", stage="tune")
    chosen = select(stage2, lambda_strategy, cfg.tolerance, cfg.top_n)
    lambda0_star = float(cfg.lambda_values[chosen])
    logger.info(f"Selected lambda0*={lambda0_star:.6g} with strategy {lambda_strategy.value}")

    return TuneResult(
        sigma_star=sigma_star,
        lambda0_star=lambda0_star,
        grid_records=list(stage1) + list(stage2),
        final_model=models[chosen],
        sigma_values=[float(s) for s in sigma_values],
        lambda_values=[float(v) for v in cfg.lambda_values],
    )
