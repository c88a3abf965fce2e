"""
MRC Core Module
Spectral uncertainty sets and the 0-1 loss minimax risk classifier trained over them
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from modules.dataset import Dataset
from modules.lp_engine import (
    SolverConfig,
    minimize_nonsmooth,
    mrc_lp_reformulation,
    solve_lp,
)
from modules.spectral_map import SpectralMap
from utils.errors import InvalidArgumentError, SolverError

logger = logging.getLogger(__name__)

DETERMINISTIC = "deterministic"
RANDOMIZED = "randomized"


@dataclass(frozen=True, eq=False)
class UncertaintySet:
    """Moment band |E_p Phi - tau| <= lambda around the empirical feature means"""
    tau: np.ndarray
    lam: np.ndarray
    lambda0: float
    phi_matrix: np.ndarray
    n: int

    @property
    def m(self) -> int:
        return self.tau.shape[0]

    def contains(self, weights: np.ndarray, atol: float = 1e-8) -> bool:
        """Whether a distribution over the phi_matrix rows satisfies the band"""
        expectation = np.asarray(weights) @ self.phi_matrix
        return bool(np.all(np.abs(expectation - self.tau) <= self.lam + atol))

    def rescaled(self, lambda0: float) -> "UncertaintySet":
        """Same moments with a different confidence multiplier"""
        return build_uncertainty(self.phi_matrix, lambda0)


def build_uncertainty(phi_matrix: np.ndarray, lambda0: float) -> UncertaintySet:
    """
    tau = column means of phi_matrix, lambda = lambda0 * sqrt(column variance / N)

    Population (1/N) variance is used for the columns.
    """
    phi_matrix = np.asarray(phi_matrix, dtype=float)
    if phi_matrix.ndim != 2 or phi_matrix.shape[0] < 2:
        raise InvalidArgumentError("Uncertainty sets need a phi matrix with at least 2 rows")
    if not np.isfinite(lambda0) or lambda0 < 0:
        raise InvalidArgumentError(f"lambda0 must be non-negative, got {lambda0}")
    n = phi_matrix.shape[0]
    tau = phi_matrix.mean(axis=0)
    lam = lambda0 * np.sqrt(phi_matrix.var(axis=0) / n)
    for array in (tau, lam, phi_matrix):
        array.setflags(write=False)
    return UncertaintySet(tau=tau, lam=lam, lambda0=float(lambda0), phi_matrix=phi_matrix, n=n)


def max_subset_score(scores: np.ndarray) -> np.ndarray:
    """
    phi(mu, x) = max over non-empty label subsets C of (sum_{y in C} score_y - 1) / |C|

    For a fixed subset size the best subset holds the largest scores, so sorting
    and scanning prefix sizes gives the same maximum as enumerating all subsets.
    """
    ordered = -np.sort(-scores, axis=1)
    sizes = np.arange(1, scores.shape[1] + 1)
    return np.max((np.cumsum(ordered, axis=1) - 1.0) / sizes, axis=1)


def randomized_rule(scores: np.ndarray) -> np.ndarray:
    """h(y|x) = (score_y - phi)_+, a probability vector over labels for every row"""
    positive = np.maximum(scores - max_subset_score(scores)[:, None], 0.0)
    totals = positive.sum(axis=1, keepdims=True)
    n_classes = scores.shape[1]
    uniform = np.full_like(positive, 1.0 / n_classes)
    return np.where(totals > 0, positive / np.where(totals > 0, totals, 1.0), uniform)


class MrcObjective:
    """
    F(mu) = lambda^T |mu| - tau^T mu + 1 + max_i phi(mu, x_i)

    Evaluates the value and a subgradient. The max over instances is a fixed-order
    reduction over the training rows.
    """

    def __init__(self, psi: np.ndarray, uncertainty: UncertaintySet, n_classes: int):
        self.psi = psi
        self.tau = uncertainty.tau
        self.lam = uncertainty.lam
        self.n_classes = n_classes
        self.block = psi.shape[1]

    def scores(self, mu: np.ndarray) -> np.ndarray:
        return self.psi @ mu.reshape(self.n_classes, self.block).T

    def value(self, mu: np.ndarray) -> float:
        return self(mu)[0]

    def __call__(self, mu: np.ndarray) -> Tuple[float, np.ndarray]:
        scores = self.scores(mu)
        ordered_labels = np.argsort(-scores, axis=1, kind="stable")
        ordered = np.take_along_axis(scores, ordered_labels, axis=1)
        sizes = np.arange(1, self.n_classes + 1)
        candidates = (np.cumsum(ordered, axis=1) - 1.0) / sizes
        best_size = np.argmax(candidates, axis=1)
        per_instance = candidates[np.arange(len(candidates)), best_size]
        i = int(np.argmax(per_instance))

        value = float(self.lam @ np.abs(mu) - self.tau @ mu + 1.0 + per_instance[i])

        size = best_size[i] + 1
        grad = self.lam * np.sign(mu) - self.tau
        grad = grad.reshape(self.n_classes, self.block).copy()
        for y in ordered_labels[i, :size]:
            grad[y] += self.psi[i] / size
        return value, grad.reshape(-1)


@dataclass(eq=False)
class MrcModel:
    """Trained minimax risk classifier"""
    mu: np.ndarray
    map: SpectralMap
    lambda0: float
    worst_case_risk: float
    objective_trace: List[float] = field(default_factory=list)
    solver_meta: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)
    prediction_rule: str = DETERMINISTIC

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        if self.mu.shape != (self.map.m,):
            raise InvalidArgumentError(
                f"Coefficient vector has length {self.mu.shape[0]}, map expects {self.map.m}"
            )
        if self.prediction_rule not in (DETERMINISTIC, RANDOMIZED):
            raise InvalidArgumentError(f"Unknown prediction rule '{self.prediction_rule}'")

    def decision_scores(self, X: np.ndarray) -> np.ndarray:
        """Phi(x, y)^T mu for each row and label"""
        return self.map.scores(X, self.mu)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Argmax label per row, ties going to the smallest label"""
        return np.argmax(self.decision_scores(X), axis=1)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Normalized positive parts of score minus phi(mu, x); uniform when all vanish"""
        return randomized_rule(self.decision_scores(X))

    def sample_predict(self, X: np.ndarray, seed: int = 0) -> np.ndarray:
        """Labels drawn from the randomized rule"""
        proba = self.predict_proba(X)
        draws = np.random.default_rng(seed).random(proba.shape[0])
        cumulative = np.cumsum(proba, axis=1)
        labels = (draws[:, None] > cumulative).sum(axis=1)
        return np.minimum(labels, proba.shape[1] - 1)

    def expected_losses(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-instance 0-1 loss of the configured prediction rule"""
        y = np.asarray(y, dtype=np.int64)
        if self.prediction_rule == RANDOMIZED:
            proba = self.predict_proba(X)
            return 1.0 - proba[np.arange(len(y)), y]
        return (self.predict(X) != y).astype(float)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mu": self.mu.tolist(),
            "map": self.map.to_dict(),
            "lambda0": float(self.lambda0),
            "worst_case_risk": float(self.worst_case_risk),
            "prediction_rule": self.prediction_rule,
            "solver_meta": self.solver_meta,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MrcModel":
        try:
            return cls(
                mu=np.asarray(data["mu"], dtype=float),
                map=SpectralMap.from_dict(data["map"]),
                lambda0=float(data["lambda0"]),
                worst_case_risk=float(data["worst_case_risk"]),
                solver_meta=dict(data.get("solver_meta", {})),
                metadata=dict(data.get("metadata", {})),
                prediction_rule=data.get("prediction_rule", DETERMINISTIC),
            )
        except KeyError as e:
            raise InvalidArgumentError(f"Model file is missing field {e}")


def _auto_step(uncertainty: UncertaintySet) -> float:
    return 0.1 / (1.0 + float(np.linalg.norm(uncertainty.tau)))


def _train_lp(phi_matrix: np.ndarray, uncertainty: UncertaintySet, labels: np.ndarray,
              n_classes: int) -> Tuple[np.ndarray, float, Dict[str, Any]]:
    lp = mrc_lp_reformulation(phi_matrix, uncertainty.tau, uncertainty.lam, labels, n_classes)
    solution = solve_lp(lp)
    if not solution.optimal:
        raise SolverError(f"MRC linear program is {solution.status.value}", stage="train")
    m = phi_matrix.shape[1]
    mu = solution.x[:m] - solution.x[m:2 * m]
    meta = {"method": "lp", "iterations": solution.iterations, "stop_reason": "optimal",
            "final_step": 0.0, "converged": True}
    return mu, solution.objective_value, meta


def train(train: Dataset, map: SpectralMap, lambda0: float,
          solver_cfg: Optional[SolverConfig] = None) -> MrcModel:
    """
    Fit the minimax risk classifier for the uncertainty set of train under map

    Args:
        train: Training data; sensitive ids are never read
        map: Feature mapping defining the moment constraints
        lambda0: Confidence multiplier of the moment band
        solver_cfg: Optimizer settings; method "lp" solves the exact LP instead

    Returns:
        MrcModel with worst_case_risk = F(mu*)
    """
    solver_cfg = solver_cfg or SolverConfig()
    if len(np.unique(train.labels)) < 2:
        raise InvalidArgumentError("Training data must contain at least 2 classes", stage="train")
    if train.n_features != map.d:
        raise InvalidArgumentError(f"Map expects {map.d} features, training data has {train.n_features}")

    phi_matrix = map.apply_batch(train)
    uncertainty = build_uncertainty(phi_matrix, lambda0)
    psi = map.base_features(train.features)
    objective = MrcObjective(psi, uncertainty, map.n_classes)

    if solver_cfg.method == "lp":
        mu, risk, meta = _train_lp(phi_matrix, uncertainty, train.labels, map.n_classes)
        trace = [risk]
    else:
        cfg = solver_cfg
        if cfg.step_constant is None:
            cfg = replace(cfg, step_constant=_auto_step(uncertainty))
        result = minimize_nonsmooth(objective, map.m, cfg)
        mu, risk, trace = result.x, result.value, result.trace
        meta = {"method": "subgradient", "iterations": result.iterations,
                "final_step": result.final_step, "stop_reason": result.stop_reason,
                "converged": result.converged, "refined": result.refined,
                "step_constant": cfg.step_constant}

    baseline = 1.0 - 1.0 / map.n_classes
    if not np.isfinite(risk) or risk > baseline + solver_cfg.tolerance:
        raise SolverError(f"Training objective {risk} is worse than the zero-coefficient value {baseline}",
                          stage="train", trace=trace)

    logger.info(f"Trained MRC: m={map.m}, lambda0={lambda0:.4g}, worst-case risk={risk:.6f}, "
                f"{meta['iterations']} iterations ({meta['stop_reason']})")
    return MrcModel(
        mu=mu,
        map=map,
        lambda0=float(lambda0),
        worst_case_risk=float(risk),
        objective_trace=list(trace),
        solver_meta=meta,
        metadata={
            "feature_names": list(train.feature_names),
            "label_names": list(train.label_names),
            "standardization": (train.standardization.to_dict()
                                if train.standardization is not None else None),
            "n_train": train.n_samples,
        },
    )


def objective_value(model: MrcModel, train: Dataset) -> float:
    """F(model.mu) on the uncertainty set of train"""
    uncertainty = build_uncertainty(model.map.apply_batch(train), model.lambda0)
    objective = MrcObjective(model.map.base_features(train.features), uncertainty, model.map.n_classes)
    return objective.value(model.mu)
