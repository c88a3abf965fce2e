"""
Guarantees Module
LP bounds on group-conditional and overall error of a frozen rule over the uncertainty set,
and the extremal distributions attaining them
"""
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from modules.dataset import Dataset
from modules.lp_engine import LinearProgram, LpStatus, Relation, Sense, solve_lp
from modules.mrc_core import MrcModel, UncertaintySet, build_uncertainty
from modules.spectral_map import FOURIER, SpectralMap
from utils.errors import DegenerateGroupError, InvalidArgumentError, SolverError, SpectreError

logger = logging.getLogger(__name__)

UPPER = "upper"
LOWER = "lower"
OVERALL = "overall"
Z_GUARD = 1e-12
MIN_GROUP_SIZE = 40
DEFAULT_MAX_FEATURES = 400
DEFAULT_AUDIT_FRACTION = 0.3


@dataclass(frozen=True, eq=False)
class AuditSet:
    """Instances with known 0-1 losses of the frozen rule and, optionally, group ids"""
    instances: np.ndarray
    phi_matrix: np.ndarray
    losses: np.ndarray
    groups: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    group_names: Sequence[str] = ()

    def __post_init__(self):
        n = self.phi_matrix.shape[0]
        if n == 0:
            raise InvalidArgumentError("Audit set is empty")
        if self.losses.shape != (n,) or self.instances.shape != (n,):
            raise InvalidArgumentError("Audit losses and instance ids must have one entry per phi row")
        if np.any(self.losses < 0) or np.any(self.losses > 1):
            raise InvalidArgumentError("Audit losses must lie in [0, 1]")
        if self.groups is not None and self.groups.shape != (n,):
            raise InvalidArgumentError("Audit group ids must have one entry per phi row")

    @property
    def n(self) -> int:
        return self.phi_matrix.shape[0]

    def group_ids(self) -> List[int]:
        if self.groups is None:
            return []
        return [int(g) for g in np.unique(self.groups)]

    def group_name(self, group: int) -> str:
        if group < len(self.group_names):
            return str(self.group_names[group])
        return str(group)

    def empirical_error(self, group: Optional[int] = None) -> float:
        if group is None:
            return float(self.losses.mean())
        return float(self.losses[self.groups == group].mean())


@dataclass
class BoundSide:
    """One side (worst or best case) of a bound"""
    side: str
    value: float
    weights: np.ndarray
    status: LpStatus
    z: float = 1.0


@dataclass
class GroupBound:
    """Lower and upper error bound of one group, or of the whole population"""
    group: Optional[int]
    group_name: str
    lower: float
    upper: float
    extremal_upper_weights: np.ndarray
    extremal_lower_weights: np.ndarray
    lp_status: Dict[str, str]
    n_instances: int
    empirical_error: float
    low_confidence: bool = False

    def to_dict(self, include_weights: bool = False) -> Dict[str, Any]:
        data = {
            "group": self.group_name,
            "group_id": self.group,
            "lower": self.lower,
            "upper": self.upper,
            "empirical_error": self.empirical_error,
            "n_instances": self.n_instances,
            "low_confidence": self.low_confidence,
            "lp_status": dict(self.lp_status),
        }
        if include_weights:
            data["extremal_upper_weights"] = self.extremal_upper_weights.tolist()
            data["extremal_lower_weights"] = self.extremal_lower_weights.tolist()
        return data


@dataclass
class GuaranteeReport:
    """All bounds computed for one frozen rule and one uncertainty set"""
    groups: List[GroupBound]
    overall: Optional[GroupBound]
    lambda0: float
    sigma: Optional[float]
    n_frequencies: Optional[int]
    reduced_from: Optional[int]
    tau_source: str
    n_audit: int
    audit: Optional[AuditSet] = field(default=None, repr=False)
    uncertainty: Optional[UncertaintySet] = field(default=None, repr=False)

    def bounds(self) -> List[GroupBound]:
        return list(self.groups) + ([self.overall] if self.overall is not None else [])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambda0": self.lambda0,
            "sigma": self.sigma,
            "n_frequencies": self.n_frequencies,
            "reduced_from": self.reduced_from,
            "tau_source": self.tau_source,
            "n_audit": self.n_audit,
            "groups": [b.to_dict() for b in self.groups],
            "overall": self.overall.to_dict() if self.overall is not None else None,
        }

    def to_frame(self) -> pd.DataFrame:
        rows = [b.to_dict() for b in self.bounds()]
        for row in rows:
            status = row.pop("lp_status")
            row["status_lower"], row["status_upper"] = status.get(LOWER), status.get(UPPER)
        return pd.DataFrame(rows)


def _check_shapes(audit: AuditSet, U: UncertaintySet):
    if audit.phi_matrix.shape[1] != U.m:
        raise InvalidArgumentError(
            f"Audit features have dimension {audit.phi_matrix.shape[1]}, uncertainty set has {U.m}; "
            "both must come from the same feature map"
        )


def _moment_rows(phi: np.ndarray, U: UncertaintySet, z_column: bool):
    """Phi^T q within z (tau +- lambda), or within tau +- lambda when z is fixed to 1"""
    n, m = phi.shape
    upper_band, lower_band = U.tau + U.lam, U.tau - U.lam
    if z_column:
        upper_rows = np.hstack([phi.T, -upper_band[:, None]])
        lower_rows = np.hstack([phi.T, -lower_band[:, None]])
        rhs = np.zeros(2 * m)
    else:
        upper_rows, lower_rows = phi.T, phi.T
        rhs = np.concatenate([upper_band, lower_band])
    A = np.vstack([upper_rows, lower_rows])
    relations = [Relation.LE] * m + [Relation.GE] * m
    return A, relations, rhs


def _solve(lp: LinearProgram, what: str) -> np.ndarray:
    solution = solve_lp(lp)
    if solution.status is LpStatus.INFEASIBLE:
        raise SolverError(
            f"Bound LP for {what} is infeasible: the audit distribution is outside the uncertainty set",
            stage="bounds",
        )
    if not solution.optimal:
        raise SolverError(f"Bound LP for {what} is {solution.status.value}", stage="bounds")
    return solution.x


def _check_side(side: str):
    if side not in (UPPER, LOWER):
        raise InvalidArgumentError(f"side must be '{UPPER}' or '{LOWER}', got '{side}'")


def group_bound_lp(audit: AuditSet, U: UncertaintySet, group: int, side: str) -> LinearProgram:
    """Charnes-Cooper LP over (q, z) for one side of a group bound"""
    _check_side(side)
    if audit.groups is None:
        raise InvalidArgumentError("Group bounds need sensitive group ids on the audit set")
    _check_shapes(audit, U)
    member = (audit.groups == group).astype(float)
    if not member.any():
        raise InvalidArgumentError(f"Group {audit.group_name(group)} has no audit instances")

    n = audit.n
    A_moment, relations, rhs = _moment_rows(audit.phi_matrix, U, z_column=True)
    total_row = np.concatenate([np.ones(n), [-1.0]])
    group_row = np.concatenate([member, [0.0]])
    return LinearProgram(
        objective=np.concatenate([audit.losses * member, [0.0]]),
        A=np.vstack([A_moment, total_row, group_row]),
        relations=relations + [Relation.EQ, Relation.EQ],
        rhs=np.concatenate([rhs, [0.0, 1.0]]),
        sense=Sense.MAX if side == UPPER else Sense.MIN,
        names=[f"q{i}" for i in range(n)] + ["z"],
    )


def group_bounds(audit: AuditSet, U: UncertaintySet, group: int, side: str) -> BoundSide:
    """
    Worst (upper) or best (lower) case error of one group over the uncertainty set

    Solves the Charnes-Cooper form of the linear-fractional program over (q, z):
    optimize c^T q subject to z(tau - lambda) <= Phi^T q <= z(tau + lambda),
    sum q = z, e^T q = 1, q >= 0, with c_i = loss_i [group_i = g] and
    e_i = [group_i = g]. The extremal distribution is p = q / z. The bounds
    q_i <= z follow from sum q = z and q >= 0 and are not added as rows.
    """
    lp = group_bound_lp(audit, U, group, side)
    n = audit.n
    member = (audit.groups == group).astype(float)
    x = _solve(lp, f"group {audit.group_name(group)} ({side})")
    q, z = np.maximum(x[:n], 0.0), float(x[n])
    # group mass under p is 1/z
    if z < Z_GUARD or 1.0 / z < Z_GUARD:
        raise DegenerateGroupError(
            f"Extremal distribution for group {audit.group_name(group)} ({side}) is degenerate (z={z:.3e})",
            stage="bounds",
        )
    weights = q / z
    value = float(np.clip(audit.losses[member > 0] @ weights[member > 0] * z, 0.0, 1.0))
    return BoundSide(side=side, value=value, weights=weights, status=LpStatus.OPTIMAL, z=z)


def overall_bound_lp(audit: AuditSet, U: UncertaintySet, side: str) -> LinearProgram:
    """LP over p for one side of the population bound"""
    _check_side(side)
    _check_shapes(audit, U)
    n = audit.n
    A_moment, relations, rhs = _moment_rows(audit.phi_matrix, U, z_column=False)
    return LinearProgram(
        objective=audit.losses.astype(float),
        A=np.vstack([A_moment, np.ones(n)]),
        relations=relations + [Relation.EQ],
        rhs=np.concatenate([rhs, [1.0]]),
        sense=Sense.MAX if side == UPPER else Sense.MIN,
        names=[f"p{i}" for i in range(n)],
    )


def overall_side(audit: AuditSet, U: UncertaintySet, side: str) -> BoundSide:
    """Worst or best case population error; needs no group ids"""
    lp = overall_bound_lp(audit, U, side)
    weights = np.maximum(_solve(lp, f"overall error ({side})"), 0.0)
    value = float(np.clip(audit.losses @ weights, 0.0, 1.0))
    return BoundSide(side=side, value=value, weights=weights, status=LpStatus.OPTIMAL)


def _pair(audit: AuditSet, lower: BoundSide, upper: BoundSide, group: Optional[int],
          min_group_size: int) -> GroupBound:
    if group is None:
        name, count, empirical = OVERALL, audit.n, audit.empirical_error()
    else:
        name = audit.group_name(group)
        count = int(np.sum(audit.groups == group))
        empirical = audit.empirical_error(group)
    low_confidence = count < min_group_size
    if low_confidence:
        logger.warning(f"Group {name} has only {count} audit instances (< {min_group_size}); "
                       f"its bounds are low-confidence")
    return GroupBound(
        group=group,
        group_name=name,
        lower=lower.value,
        upper=upper.value,
        extremal_upper_weights=upper.weights,
        extremal_lower_weights=lower.weights,
        lp_status={LOWER: lower.status.value, UPPER: upper.status.value},
        n_instances=count,
        empirical_error=empirical,
        low_confidence=low_confidence,
    )


def group_bound(audit: AuditSet, U: UncertaintySet, group: int,
                min_group_size: int = MIN_GROUP_SIZE) -> GroupBound:
    """Both sides of the bound for one group"""
    lower = group_bounds(audit, U, group, LOWER)
    upper = group_bounds(audit, U, group, UPPER)
    return _pair(audit, lower, upper, group, min_group_size)


def overall_bounds(audit: AuditSet, U: UncertaintySet) -> GroupBound:
    """Both sides of the population error bound"""
    lower = overall_side(audit, U, LOWER)
    upper = overall_side(audit, U, UPPER)
    return _pair(audit, lower, upper, None, 0)


def all_group_bounds(audit: AuditSet, U: UncertaintySet, min_group_size: int = MIN_GROUP_SIZE,
                     max_workers: int = 1) -> List[GroupBound]:
    """Bounds for every group present in the audit set, ordered by group id"""
    groups = audit.group_ids()
    results: Dict[int, GroupBound] = {}
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_group = {executor.submit(group_bound, audit, U, g, min_group_size): g for g in groups}
        for future in as_completed(future_to_group):
            results[future_to_group[future]] = future.result()
    return [results[g] for g in groups]


def worst_case_risk_dual(audit: AuditSet, U: UncertaintySet) -> float:
    """
    Worst-case population error of the rule through the dual program

    min over mu, nu of lambda^T |mu| - tau^T mu + nu subject to
    nu >= loss_i + Phi_i^T mu for every audit instance. Equals the upper side
    of overall_bounds by LP duality.
    """
    _check_shapes(audit, U)
    n, m = audit.phi_matrix.shape
    A = np.hstack([-audit.phi_matrix, audit.phi_matrix, np.ones((n, 1))])
    lp = LinearProgram(
        objective=np.concatenate([U.lam - U.tau, U.lam + U.tau, [1.0]]),
        A=A,
        relations=[Relation.GE] * n,
        rhs=audit.losses.astype(float),
        sense=Sense.MIN,
        lower=np.concatenate([np.zeros(2 * m), [-np.inf]]),
    )
    solution = solve_lp(lp)
    if not solution.optimal:
        raise SolverError(f"Dual worst-case risk LP is {solution.status.value}", stage="bounds")
    return solution.objective_value


def select_audit_indices(ds: Dataset, fraction: float = DEFAULT_AUDIT_FRACTION, seed: int = 0) -> np.ndarray:
    """
    Positions of an audit subset, stratified by group when every group has at least 2 rows

    Returns:
        Sorted row positions into ds
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgumentError(f"Audit fraction must lie in (0, 1], got {fraction}")
    rows = np.arange(ds.n_samples)
    if fraction == 1.0:
        return rows
    stratify = None
    if ds.sensitive is not None:
        _, counts = np.unique(ds.sensitive, return_counts=True)
        n_audit = int(np.ceil(fraction * ds.n_samples))
        if counts.min() >= 2 and n_audit >= len(counts) and ds.n_samples - n_audit >= len(counts):
            stratify = ds.sensitive
        else:
            logger.warning("Group sizes too small for a stratified audit subset, sampling uniformly")
    audit_rows, _ = train_test_split(rows, train_size=fraction, stratify=stratify, random_state=seed)
    return np.sort(audit_rows)


def reduce_for_bounds(spectral: SpectralMap, max_features: Optional[int] = DEFAULT_MAX_FEATURES) -> SpectralMap:
    """Truncate a fourier map so its dimension m stays within max_features"""
    if max_features is None or spectral.m <= max_features:
        return spectral
    if spectral.kind != FOURIER:
        logger.warning(f"Cannot reduce a {spectral.kind} map with m={spectral.m}; using it unchanged")
        return spectral
    n_frequencies = max(1, max_features // (2 * spectral.n_classes))
    logger.info(f"Reducing feature map for bounds: D={spectral.D} -> {n_frequencies} "
                f"(m={spectral.m} -> {2 * n_frequencies * spectral.n_classes})")
    return spectral.truncated(n_frequencies)


def build_audit_set(model: MrcModel, ds: Dataset, spectral: Optional[SpectralMap] = None) -> AuditSet:
    """Audit set of ds under the model's prediction rule, featurized by spectral"""
    spectral = spectral or model.map
    return AuditSet(
        instances=np.asarray(ds.indices),
        phi_matrix=spectral.apply_batch(ds),
        losses=model.expected_losses(ds.features, ds.labels),
        groups=None if ds.sensitive is None else np.asarray(ds.sensitive),
        labels=np.asarray(ds.labels),
        group_names=ds.group_names,
    )


def label_completed_audit(model: MrcModel, ds: Dataset) -> AuditSet:
    """
    Every (x_i, y) pair of ds with the expected 0-1 loss 1 - h(y | x_i) of the randomized rule

    Rows are ordered instance-major, label-minor.
    """
    n, n_classes = ds.n_samples, model.map.n_classes
    features = np.repeat(ds.features, n_classes, axis=0)
    labels = np.tile(np.arange(n_classes), n)
    proba = model.predict_proba(ds.features)
    return AuditSet(
        instances=np.repeat(np.asarray(ds.indices), n_classes),
        phi_matrix=model.map.apply_rows(features, labels),
        losses=1.0 - proba.reshape(-1),
        labels=labels,
    )


def minimax_consistency(model: MrcModel, train_ds: Dataset) -> Dict[str, float]:
    """
    Compare the training objective with the worst-case risk of the randomized rule

    The worst case is taken over distributions on the label-completed training
    support that satisfy the training moment band.
    """
    U = build_uncertainty(model.map.apply_batch(train_ds), model.lambda0)
    audit = label_completed_audit(model, train_ds)
    bound = overall_side(audit, U, UPPER).value
    result = {
        "worst_case_risk": float(model.worst_case_risk),
        "randomized_rule_bound": float(bound),
        "gap": float(abs(bound - model.worst_case_risk)),
    }
    logger.info(f"Minimax consistency: objective {result['worst_case_risk']:.6f}, "
                f"LP worst case {result['randomized_rule_bound']:.6f}")
    return result


def compute_bounds(model: MrcModel,
                   audit_ds: Dataset,
                   lambda0: Optional[float] = None,
                   spectral: Optional[SpectralMap] = None,
                   tau_source: str = "audit",
                   reference: Optional[Dataset] = None,
                   max_features: Optional[int] = DEFAULT_MAX_FEATURES,
                   min_group_size: int = MIN_GROUP_SIZE,
                   include_groups: bool = True,
                   max_workers: int = 1) -> GuaranteeReport:
    """
    Group and overall bounds of a frozen model on an audit dataset

    Args:
        model: Frozen rule whose losses are bounded
        audit_ds: Audit instances; group ids needed only for group bounds
        lambda0: Band multiplier, the model's own by default
        spectral: Feature map for the moment constraints, the model's own by default
        tau_source: "audit" takes tau and lambda from the audit set, "train" from reference
        reference: Dataset for tau_source "train"
        max_features: Down-project fourier maps above this dimension
        min_group_size: Groups smaller than this are flagged low-confidence
        include_groups: Skip group bounds and only compute overall bounds when False
        max_workers: Parallel group LP solves

    Returns:
        GuaranteeReport
    """
    lambda0 = model.lambda0 if lambda0 is None else float(lambda0)
    base_map = spectral or model.map
    bound_map = reduce_for_bounds(base_map, max_features)
    audit = build_audit_set(model, audit_ds, bound_map)

    if tau_source == "audit":
        U = build_uncertainty(audit.phi_matrix, lambda0)
    elif tau_source == "train":
        if reference is None:
            raise InvalidArgumentError("tau_source 'train' needs the training dataset")
        U = build_uncertainty(bound_map.apply_batch(reference), lambda0)
    else:
        raise InvalidArgumentError(f"Unknown tau_source '{tau_source}'")

    groups: List[GroupBound] = []
    if include_groups:
        if audit.groups is None:
            raise InvalidArgumentError(
                "Group bounds need a sensitive column; overall bounds are still available", stage="bounds"
            )
        groups = all_group_bounds(audit, U, min_group_size, max_workers)
    overall = overall_bounds(audit, U)

    report = GuaranteeReport(
        groups=groups,
        overall=overall,
        lambda0=lambda0,
        sigma=bound_map.sigma if bound_map.kind == FOURIER else None,
        n_frequencies=bound_map.D if bound_map.kind == FOURIER else None,
        reduced_from=base_map.D if bound_map is not base_map else None,
        tau_source=tau_source,
        n_audit=audit.n,
        audit=audit,
        uncertainty=U,
    )
    for bound in report.bounds():
        logger.info(f"Bounds lambda0={lambda0:.4g} {bound.group_name}: "
                    f"[{bound.lower:.4f}, {bound.upper:.4f}] (empirical {bound.empirical_error:.4f})")
    return report


def bound_sweep(model: MrcModel,
                audit_ds: Dataset,
                parameter: str,
                values: Sequence[float],
                tau_source: str = "audit",
                reference: Optional[Dataset] = None,
                max_features: Optional[int] = DEFAULT_MAX_FEATURES,
                min_group_size: int = MIN_GROUP_SIZE,
                include_groups: bool = True,
                retrain=None,
                max_workers: int = 1) -> pd.DataFrame:
    """
    Recompute bounds over a grid of lambda0 or sigma values

    For a sigma grid the feature map is rebuilt from the model's seed at each
    value; when retrain is given it is called with the new map to produce the
    rule evaluated at that value, else the frozen model's losses are kept.
    Failed cells are marked and the sweep continues.

    Returns:
        Long-format table ordered by (grid value, group id) with an overall row per value
    """
    if parameter not in ("lambda0", "sigma"):
        raise InvalidArgumentError(f"Sweep parameter must be 'lambda0' or 'sigma', got '{parameter}'")
    if len(values) == 0:
        raise InvalidArgumentError("Bound sweep grid is empty")
    if parameter == "sigma" and model.map.kind != FOURIER:
        raise InvalidArgumentError("Sigma sweeps need a fourier map")

    rows: List[Dict[str, Any]] = []
    for value in values:
        cell = {"parameter": parameter, "value": float(value)}
        try:
            if parameter == "lambda0":
                report = compute_bounds(model, audit_ds, lambda0=value, tau_source=tau_source,
                                        reference=reference, max_features=max_features,
                                        min_group_size=min_group_size, include_groups=include_groups,
                                        max_workers=max_workers)
            else:
                spectral = model.map.with_sigma(float(value))
                rule = retrain(spectral) if retrain is not None else model
                report = compute_bounds(rule, audit_ds, spectral=spectral, tau_source=tau_source,
                                        reference=reference, max_features=max_features,
                                        min_group_size=min_group_size, include_groups=include_groups,
                                        max_workers=max_workers)
        except SpectreError as e:
            logger.error(f"Bound sweep cell {parameter}={value:.4g} failed: {e}")
            rows.append({**cell, "group": None, "group_id": None, "lower": np.nan, "upper": np.nan,
                         "failed": True, "error": str(e)})
            continue
        frame = report.to_frame()
        for record in frame.to_dict(orient="records"):
            rows.append({**cell, **record, "n_frequencies": report.n_frequencies,
                         "failed": False, "error": None})
    return pd.DataFrame(rows)


@dataclass
class ExtremalReport:
    """Per-instance reweighting of an extremal distribution against the uniform one"""
    group: str
    side: str
    instances: pd.DataFrame
    group_marginals: Dict[str, float]
    label_marginals: Dict[str, float]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "group": self.group,
            "side": self.side,
            "group_marginals": self.group_marginals,
            "label_marginals": self.label_marginals,
            "n_instances": len(self.instances),
            "n_upweighted": int((self.instances["delta"] > 0).sum()),
            "n_downweighted": int((self.instances["delta"] < 0).sum()),
        }


def extremal_report(bound: GroupBound, audit: AuditSet, side: str = UPPER,
                    label_names: Sequence[str] = ()) -> ExtremalReport:
    """
    Deltas p_i - 1/N of an extremal distribution and its group and label marginals

    Args:
        bound: Group or overall bound holding the extremal weights
        audit: Audit set the bound was computed on
        side: Which extremal distribution to report
        label_names: Display names of the label ids
    """
    _check_side(side)
    weights = bound.extremal_upper_weights if side == UPPER else bound.extremal_lower_weights
    if weights.shape != (audit.n,):
        raise InvalidArgumentError("Extremal weights do not match the audit set")

    frame = pd.DataFrame({
        "instance": audit.instances,
        "loss": audit.losses,
        "weight": weights,
        "delta": weights - 1.0 / audit.n,
    })
    group_marginals: Dict[str, float] = {}
    if audit.groups is not None:
        frame.insert(1, "group", [audit.group_name(int(g)) for g in audit.groups])
        group_marginals = {str(k): float(v) for k, v in frame.groupby("group", sort=True)["weight"].sum().items()}
    label_marginals: Dict[str, float] = {}
    if audit.labels is not None:
        names = [label_names[y] if y < len(label_names) else str(y) for y in audit.labels]
        frame.insert(1, "label", names)
        label_marginals = {str(k): float(v) for k, v in frame.groupby("label", sort=True)["weight"].sum().items()}
    return ExtremalReport(group=bound.group_name, side=side, instances=frame,
                          group_marginals=group_marginals, label_marginals=label_marginals)
