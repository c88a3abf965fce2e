"""
LP Engine Module
Dense revised simplex, nonsmooth convex minimization, and the exact LP form of the MRC objective
"""
import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from utils.errors import InvalidArgumentError, SolverError

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-8
PIVOT_TOL = 1e-10
REDUCED_COST_TOL = 1e-9
DUALITY_GAP_TOL = 1e-6
BLAND_AFTER_DEGENERATE = 5000
REFACTOR_EVERY = 100
MRC_LP_MAX_DIM = 200


class Relation(str, Enum):
    LE = "<="
    EQ = "="
    GE = ">="


class Sense(str, Enum):
    MIN = "min"
    MAX = "max"


class LpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


@dataclass(eq=False)
class LinearProgram:
    """
    optimize objective^T x + offset
    subject to A x (<=|=|>=) rhs, lower <= x <= upper
    """
    objective: np.ndarray
    A: np.ndarray
    relations: List[Relation]
    rhs: np.ndarray
    sense: Sense = Sense.MIN
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    offset: float = 0.0
    names: Optional[List[str]] = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        n = self.objective.shape[0]
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.rhs = np.asarray(self.rhs, dtype=float).reshape(-1)
        self.relations = [Relation(r) for r in self.relations]
        self.sense = Sense(self.sense)
        self.lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)

        if self.objective.ndim != 1 or n == 0:
            raise InvalidArgumentError("LP objective must be a non-empty vector")
        if not (self.A.shape[0] == self.rhs.shape[0] == len(self.relations)):
            raise InvalidArgumentError(
                f"LP has {self.A.shape[0]} rows, {self.rhs.shape[0]} right-hand sides "
                f"and {len(self.relations)} relations"
            )
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise InvalidArgumentError("Variable bounds must have one entry per variable")
        if np.any(self.lower > self.upper):
            raise InvalidArgumentError("Every variable needs lower <= upper")
        if np.any(self.lower == np.inf) or np.any(self.upper == -np.inf):
            raise InvalidArgumentError("Variable bounds cannot exclude every real value")
        for name, values in (("objective", self.objective), ("A", self.A), ("rhs", self.rhs)):
            if not np.all(np.isfinite(values)):
                raise InvalidArgumentError(f"LP {name} contains non-finite entries")
        if self.names is not None and len(self.names) != n:
            raise InvalidArgumentError("LP needs one name per variable")

    @property
    def n_vars(self) -> int:
        return self.objective.shape[0]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def objective_value(self, x: np.ndarray) -> float:
        return float(self.objective @ x + self.offset)

    def max_violation(self, x: np.ndarray) -> float:
        """Largest absolute violation over constraints and bounds"""
        activity = self.A @ x
        violation = 0.0
        for relation in Relation:
            mask = np.array([r is relation for r in self.relations], dtype=bool)
            if not mask.any():
                continue
            gap = activity[mask] - self.rhs[mask]
            if relation is Relation.LE:
                violation = max(violation, float(np.max(gap, initial=0.0)))
            elif relation is Relation.GE:
                violation = max(violation, float(np.max(-gap, initial=0.0)))
            else:
                violation = max(violation, float(np.max(np.abs(gap), initial=0.0)))
        violation = max(violation, float(np.max(self.lower - x, initial=0.0)))
        violation = max(violation, float(np.max(x - self.upper, initial=0.0)))
        return violation


@dataclass
class LpSolution:
    """Result of solve_lp"""
    status: LpStatus
    x: np.ndarray
    objective_value: float
    iterations: int = 0
    dual_objective: Optional[float] = None
    max_violation: Optional[float] = None

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


@dataclass
class SolverConfig:
    """Settings for MRC training and the nonsmooth minimizer"""
    max_iters: int = 20000
    step_constant: Optional[float] = None
    patience: int = 200
    tolerance: float = 1e-6
    seed: int = 0
    restarts: int = 4
    method: str = "subgradient"
    strict: bool = False
    log_every: int = 1000
    refine_max_dim: int = 24  # cutting-plane refinement up to this dimension, 0 disables
    refine_iters: int = 300

    def __post_init__(self):
        if self.max_iters < 1 or self.patience < 1 or self.log_every < 1:
            raise InvalidArgumentError("max_iters, patience and log_every must be positive")
        if self.tolerance <= 0:
            raise InvalidArgumentError(f"tolerance must be positive, got {self.tolerance}")
        if self.step_constant is not None and self.step_constant <= 0:
            raise InvalidArgumentError(f"step_constant must be positive, got {self.step_constant}")
        if self.restarts < 0:
            raise InvalidArgumentError(f"restarts must be non-negative, got {self.restarts}")
        if self.refine_max_dim < 0 or self.refine_iters < 0:
            raise InvalidArgumentError("refine_max_dim and refine_iters must be non-negative")
        if self.method not in ("subgradient", "lp"):
            raise InvalidArgumentError(f"Unknown training method '{self.method}'")


@dataclass
class NonsmoothResult:
    """Output of minimize_nonsmooth"""
    x: np.ndarray
    value: float
    trace: List[float] = field(default_factory=list)
    iterations: int = 0
    final_step: float = 0.0
    stop_reason: str = "max_iters"
    converged: bool = False
    refined: bool = False


# ---------------------------------------------------------------------------
# Standard form conversion
# ---------------------------------------------------------------------------

@dataclass
class _StandardForm:
    """min c^T v s.t. A v = b, v >= 0, with x = shift + T v"""
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    constant: float
    shift: np.ndarray
    transform: np.ndarray
    basis_hint: List[Optional[int]]
    n_structural: int


def _to_standard_form(lp: LinearProgram) -> _StandardForm:
    n = lp.n_vars
    sign = 1.0 if lp.sense is Sense.MIN else -1.0

    shift = np.zeros(n)
    columns: List[Tuple[int, float]] = []
    bound_rows: List[Tuple[int, float]] = []
    for j in range(n):
        lo, hi = lp.lower[j], lp.upper[j]
        if np.isfinite(lo):
            shift[j] = lo
            columns.append((j, 1.0))
            if np.isfinite(hi):
                bound_rows.append((len(columns) - 1, hi - lo))
        elif np.isfinite(hi):
            shift[j] = hi
            columns.append((j, -1.0))
        else:
            columns.append((j, 1.0))
            columns.append((j, -1.0))

    n_struct = len(columns)
    transform = np.zeros((n, n_struct))
    for col, (j, coef) in enumerate(columns):
        transform[j, col] = coef

    rows = lp.A @ transform
    rhs = lp.rhs - lp.A @ shift
    relations = list(lp.relations)
    if bound_rows:
        extra = np.zeros((len(bound_rows), n_struct))
        for r, (col, width) in enumerate(bound_rows):
            extra[r, col] = 1.0
        rows = np.vstack([rows, extra])
        rhs = np.concatenate([rhs, [width for _, width in bound_rows]])
        relations += [Relation.LE] * len(bound_rows)

    n_rows = rows.shape[0]
    n_slack = sum(r is not Relation.EQ for r in relations)
    A = np.zeros((n_rows, n_struct + n_slack))
    A[:, :n_struct] = rows
    b = rhs.copy()
    basis_hint: List[Optional[int]] = [None] * n_rows
    slack = n_struct
    for i, relation in enumerate(relations):
        slack_coef = 0.0
        if relation is not Relation.EQ:
            slack_coef = 1.0 if relation is Relation.LE else -1.0
            A[i, slack] = slack_coef
        # flip so b >= 0 and, where possible, the slack enters with +1
        if b[i] < 0 or (b[i] == 0 and slack_coef < 0):
            A[i] = -A[i]
            b[i] = -b[i]
            slack_coef = -slack_coef
        if slack_coef > 0:
            basis_hint[i] = slack
        if relation is not Relation.EQ:
            slack += 1

    c = np.zeros(A.shape[1])
    c[:n_struct] = sign * (transform.T @ lp.objective)
    constant = sign * float(lp.objective @ shift)
    return _StandardForm(A=A, b=b, c=c, constant=constant, shift=shift, transform=transform,
                         basis_hint=basis_hint, n_structural=n_struct)


# ---------------------------------------------------------------------------
# Revised simplex
# ---------------------------------------------------------------------------

class _RevisedSimplex:
    """Revised simplex on min c^T v, A v = b, v >= 0 with an explicit basis inverse"""

    def __init__(self, A: np.ndarray, b: np.ndarray, basis: List[int], max_iters: int):
        self.A = A
        self.b = b
        self.basis = list(basis)
        self.max_iters = max_iters
        self.iterations = 0
        self.degenerate_pivots = 0
        self.bland = False
        self.refactor()

    def refactor(self):
        lu = linalg.lu_factor(self.A[:, self.basis])
        self.binv = linalg.lu_solve(lu, np.eye(len(self.basis)))
        self.x_basic = linalg.lu_solve(lu, self.b)
        self.x_basic[np.abs(self.x_basic) < PIVOT_TOL * 1e-2] = 0.0
        self._since_refactor = 0

    def _entering(self, reduced: np.ndarray) -> Optional[int]:
        candidates = np.flatnonzero(reduced < -REDUCED_COST_TOL)
        if candidates.size == 0:
            return None
        if self.bland:
            return int(candidates[0])
        return int(candidates[np.argmin(reduced[candidates])])

    def _leaving(self, column: np.ndarray) -> Optional[int]:
        eligible = np.flatnonzero(column > PIVOT_TOL)
        if eligible.size == 0:
            return None
        ratios = np.maximum(self.x_basic[eligible], 0.0) / column[eligible]
        best = ratios.min()
        ties = eligible[ratios <= best + FEASIBILITY_TOL * 1e-3 * (1.0 + best)]
        if self.bland:
            return int(min(ties, key=lambda r: self.basis[r]))
        # largest pivot element among ties, then the lowest row
        return int(ties[np.lexsort((ties, -column[ties]))[0]])

    def _pivot(self, row: int, entering: int, column: np.ndarray):
        step = max(self.x_basic[row], 0.0) / column[row]
        if step <= FEASIBILITY_TOL:
            self.degenerate_pivots += 1
            if not self.bland and self.degenerate_pivots >= BLAND_AFTER_DEGENERATE:
                logger.debug(f"Switching to Bland's rule after {self.degenerate_pivots} degenerate pivots")
                self.bland = True
        self.x_basic -= step * column
        self.x_basic[row] = step
        pivot_row = self.binv[row] / column[row]
        self.binv -= np.outer(column, pivot_row)
        self.binv[row] = pivot_row
        self.basis[row] = entering
        self._since_refactor += 1
        if self._since_refactor >= REFACTOR_EVERY:
            self.refactor()

    def run(self, c: np.ndarray) -> LpStatus:
        """Iterate to optimality or detect unboundedness"""
        while True:
            duals = c[self.basis] @ self.binv
            reduced = c - duals @ self.A
            reduced[self.basis] = 0.0
            entering = self._entering(reduced)
            if entering is None:
                return LpStatus.OPTIMAL
            column = self.binv @ self.A[:, entering]
            row = self._leaving(column)
            if row is None:
                return LpStatus.UNBOUNDED
            self._pivot(row, entering, column)
            self.iterations += 1
            if self.iterations >= self.max_iters:
                raise SolverError(
                    f"Simplex hit the iteration limit ({self.max_iters}) "
                    f"with {self.degenerate_pivots} degenerate pivots",
                    stage="solve_lp",
                )

    def drive_out(self, artificial_start: int) -> List[int]:
        """
        Pivot artificials left in the basis at zero level out of it

        Returns:
            Basis positions whose artificial could not be replaced; the
            constraint row of each such artificial is redundant
        """
        redundant = []
        for position, var in enumerate(list(self.basis)):
            if var < artificial_start:
                continue
            tableau_row = self.binv[position] @ self.A[:, :artificial_start]
            tableau_row[[v for v in self.basis if v < artificial_start]] = 0.0
            candidates = np.flatnonzero(np.abs(tableau_row) > PIVOT_TOL * 1e2)
            if candidates.size == 0:
                redundant.append(position)
                continue
            entering = int(candidates[np.argmax(np.abs(tableau_row[candidates]))])
            column = self.binv @ self.A[:, entering]
            pivot_row = self.binv[position] / column[position]
            self.binv -= np.outer(column, pivot_row)
            self.binv[position] = pivot_row
            self.basis[position] = entering
        return redundant


def _default_iteration_limit(n_rows: int, n_cols: int) -> int:
    return max(10000, 50 * (n_rows + n_cols))


def _finish_without_rows(lp: LinearProgram, std: _StandardForm, iterations: int) -> LpSolution:
    """Programs whose standard form has no constraint rows left"""
    if np.any(std.c < -REDUCED_COST_TOL):
        sign = 1.0 if lp.sense is Sense.MIN else -1.0
        return LpSolution(LpStatus.UNBOUNDED, np.full(lp.n_vars, np.nan), sign * -np.inf, iterations)
    x = std.shift.copy()
    value = lp.objective_value(x)
    return LpSolution(LpStatus.OPTIMAL, x, value, iterations, value, lp.max_violation(x))


def solve_lp(lp: LinearProgram, max_iters: Optional[int] = None) -> LpSolution:
    """
    Solve a linear program with a two-phase dense revised simplex

    Dantzig pricing with Bland's rule as anti-cycling fallback. Infeasible and
    unbounded programs are reported through the status, never raised.

    Args:
        lp: Program to solve
        max_iters: Pivot limit per phase (defaults to a multiple of the problem size)

    Returns:
        LpSolution with the optimal basic solution and a dual objective certificate
    """
    std = _to_standard_form(lp)
    n_rows, n_cols = std.A.shape
    limit = max_iters or _default_iteration_limit(n_rows, n_cols)
    sign = 1.0 if lp.sense is Sense.MIN else -1.0

    if n_rows == 0:
        return _finish_without_rows(lp, std, 0)

    # phase 1: artificial variables on rows without a usable slack
    needs_artificial = [i for i, hint in enumerate(std.basis_hint) if hint is None]
    A1 = np.hstack([std.A, np.zeros((n_rows, len(needs_artificial)))])
    basis = list(std.basis_hint)
    for k, row in enumerate(needs_artificial):
        A1[row, n_cols + k] = 1.0
        basis[row] = n_cols + k
    simplex = _RevisedSimplex(A1, std.b, basis, limit)
    iterations = 0

    if needs_artificial:
        c1 = np.zeros(A1.shape[1])
        c1[n_cols:] = 1.0
        simplex.run(c1)
        simplex.refactor()
        infeasibility = float(c1[simplex.basis] @ simplex.x_basic)
        iterations = simplex.iterations
        if infeasibility > FEASIBILITY_TOL * max(1.0, float(np.abs(std.b).max())):
            logger.debug(f"LP infeasible: phase 1 residual {infeasibility:.3e}")
            return LpSolution(LpStatus.INFEASIBLE, np.full(lp.n_vars, np.nan), float("nan"), iterations)

        redundant_positions = set(simplex.drive_out(n_cols))
        # an artificial is a unit column in the constraint row it was created for
        redundant_rows = {needs_artificial[simplex.basis[p] - n_cols] for p in redundant_positions}
        if redundant_rows:
            logger.debug(f"Dropping {len(redundant_rows)} redundant constraint rows")
        keep = [i for i in range(n_rows) if i not in redundant_rows]
        if not keep:
            return _finish_without_rows(lp, std, iterations)
        basis = [var for p, var in enumerate(simplex.basis) if p not in redundant_positions]
        simplex = _RevisedSimplex(std.A[keep], std.b[keep], basis, limit)
        simplex.iterations = iterations

    status = simplex.run(std.c)
    iterations = simplex.iterations
    if status is LpStatus.UNBOUNDED:
        return LpSolution(LpStatus.UNBOUNDED, np.full(lp.n_vars, np.nan), sign * -np.inf, iterations)

    # fresh factorization for the reported point and the dual certificate
    B = simplex.A[:, simplex.basis]
    lu = linalg.lu_factor(B)
    x_basic = np.maximum(linalg.lu_solve(lu, simplex.b), 0.0)
    duals = linalg.lu_solve(lu, std.c[simplex.basis], trans=1)
    v = np.zeros(n_cols)
    v[simplex.basis] = x_basic
    x = std.shift + std.transform @ v[:std.n_structural]

    primal = lp.objective_value(x)
    dual = sign * (float(simplex.b @ duals) + std.constant) + lp.offset
    gap = abs(primal - dual)
    if gap > DUALITY_GAP_TOL * (1.0 + abs(primal)):
        logger.warning(f"LP duality gap {gap:.3e} exceeds tolerance (primal {primal:.9g}, dual {dual:.9g})")
    violation = lp.max_violation(x)
    logger.debug(f"LP solved: {lp.n_vars} vars, {lp.n_rows} rows, {iterations} pivots, "
                 f"objective {primal:.9g}, violation {violation:.2e}")
    return LpSolution(LpStatus.OPTIMAL, x, primal, iterations, dual, violation)


def write_lp_file(lp: LinearProgram, path: Union[str, Path]) -> Path:
    """Dump the program in CPLEX LP text format for external cross-checking"""
    names = lp.names or [f"x{j}" for j in range(lp.n_vars)]

    def expression(coefs: np.ndarray) -> str:
        terms = [f"{'-' if a < 0 else '+'} {abs(a):.17g} {names[j]}"
                 for j, a in enumerate(coefs) if a != 0.0]
        return " ".join(terms) if terms else f"0 {names[0]}"

    lines = ["\\ written by spectre lp_engine", "Minimize" if lp.sense is Sense.MIN else "Maximize"]
    objective = expression(lp.objective)
    if lp.offset:
        objective += f" {'-' if lp.offset < 0 else '+'} {abs(lp.offset):.17g}"
    lines.append(f" obj: {objective}")
    lines.append("Subject To")
    for i in range(lp.n_rows):
        lines.append(f" c{i}: {expression(lp.A[i])} {lp.relations[i].value} {lp.rhs[i]:.17g}")
    lines.append("Bounds")
    for j, name in enumerate(names):
        lo, hi = lp.lower[j], lp.upper[j]
        if not np.isfinite(lo) and not np.isfinite(hi):
            lines.append(f" {name} free")
        elif lo == 0.0 and not np.isfinite(hi):
            continue
        else:
            lo_text = f"{lo:.17g}" if np.isfinite(lo) else "-inf"
            hi_text = f"{hi:.17g}" if np.isfinite(hi) else "+inf"
            lines.append(f" {lo_text} <= {name} <= {hi_text}")
    lines.append("End")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote LP with {lp.n_vars} variables and {lp.n_rows} rows to {path}")
    return path


# ---------------------------------------------------------------------------
# Nonsmooth minimization
# ---------------------------------------------------------------------------

def _refine_cutting_plane(f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
                          x0: np.ndarray,
                          cfg: SolverConfig,
                          trace: List[float]) -> Tuple[np.ndarray, float, int, bool]:
    """
    Box-step cutting-plane method started from x0

    Every evaluated subgradient gives a global linear minorant of f. Each step
    minimizes the pointwise maximum of the minorants over a box around the
    current center with solve_lp, then evaluates f at the minimizer. The center
    moves when the decrease is at least a tenth of the predicted one. When the
    predicted decrease drops below cfg.tolerance with the box inactive (or the
    box has grown by 1e4), the center is within cfg.tolerance of the minimum.
    Piecewise-linear f is solved exactly in finitely many steps.

    Returns:
        (center, value at center, steps taken, certified)
    """
    dim = x0.shape[0]
    center = x0.copy()
    center_value, grad = f(center)
    points, values, grads = [center.copy()], [float(center_value)], [np.asarray(grad, dtype=float)]
    radius = max(1.0, float(np.max(np.abs(center))))
    radius_cap = 1e4 * radius
    objective = np.concatenate([np.zeros(dim), [1.0]])

    for step in range(1, cfg.refine_iters + 1):
        G = np.vstack(grads)
        X = np.vstack(points)
        # f_j + g_j^T (center + d - x_j) <= t
        rhs = -(np.asarray(values) + np.einsum("ij,ij->i", G, center[None, :] - X))
        master = LinearProgram(
            objective=objective,
            A=np.column_stack([G, -np.ones(len(values))]),
            relations=[Relation.LE] * len(values),
            rhs=rhs,
            lower=np.concatenate([np.full(dim, -radius), [-np.inf]]),
            upper=np.concatenate([np.full(dim, radius), [np.inf]]),
        )
        solution = solve_lp(master)
        if not solution.optimal:
            logger.warning(f"Cutting-plane master problem is {solution.status.value}; keeping the current point")
            return center, center_value, step - 1, False

        d, model_value = solution.x[:dim], float(solution.x[dim])
        predicted = center_value - model_value
        if predicted <= cfg.tolerance:
            box_active = float(np.max(np.abs(d))) >= radius * (1.0 - 1e-9)
            if box_active and radius < radius_cap:
                radius *= 10.0
                trace.append(center_value)
                continue
            trace.append(center_value)
            return center, center_value, step, True

        candidate = center + d
        value, grad = f(candidate)
        if not np.isfinite(value):
            raise SolverError(f"Objective became non-finite during refinement step {step}",
                              stage="minimize_nonsmooth", trace=trace)
        points.append(candidate)
        values.append(float(value))
        grads.append(np.asarray(grad, dtype=float))
        if value <= center_value - 0.1 * predicted:
            center, center_value = candidate, float(value)
        trace.append(center_value)

    return center, center_value, cfg.refine_iters, False


def minimize_nonsmooth(f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
                       dim: int,
                       cfg: SolverConfig,
                       x0: Optional[np.ndarray] = None) -> NonsmoothResult:
    """
    Subgradient descent with step c/sqrt(t) and running averages of the iterates

    The best of the current iterate and the running average is tracked each step.
    When the best value has not improved by cfg.tolerance for cfg.patience steps,
    the method restarts from the best point with half the step constant, up to
    cfg.restarts times.

    Problems with at most cfg.refine_max_dim variables are then finished by a
    cutting-plane refinement from the best point; converged and stop_reason
    describe the descent phase only.

    Args:
        f: Returns (value, subgradient) at a point
        dim: Dimension of the search space
        cfg: Iteration budget, step constant, patience and tolerance
        x0: Starting point, zero by default

    Returns:
        NonsmoothResult with the best point found and the best-so-far trace
    """
    x = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (dim,):
        raise InvalidArgumentError(f"Starting point must have length {dim}")
    step_constant = cfg.step_constant if cfg.step_constant is not None else 0.1

    value, grad = f(x)
    if not np.isfinite(value):
        raise SolverError("Objective is not finite at the starting point", stage="minimize_nonsmooth")
    best_x, best_value = x.copy(), float(value)
    average = x.copy()
    reference, reference_iter = best_value, 0
    restarts_left = cfg.restarts
    t = 0
    trace: List[float] = []
    stop_reason = "max_iters"
    step = step_constant

    for iteration in range(1, cfg.max_iters + 1):
        t += 1
        step = step_constant / np.sqrt(t)
        x = x - step * grad
        average += (x - average) / (t + 1)

        value, grad = f(x)
        average_value, _ = f(average)
        if not (np.isfinite(value) and np.isfinite(average_value)):
            raise SolverError(f"Objective became non-finite at iteration {iteration}",
                              stage="minimize_nonsmooth", trace=trace)
        if value < best_value:
            best_x, best_value = x.copy(), float(value)
        if average_value < best_value:
            best_x, best_value = average.copy(), float(average_value)
        trace.append(best_value)

        if best_value < reference - cfg.tolerance:
            reference, reference_iter = best_value, iteration
        if iteration % cfg.log_every == 0:
            logger.debug(f"iter {iteration}: best {best_value:.9f}, step {step:.3e}")

        if iteration - reference_iter >= cfg.patience:
            if restarts_left == 0:
                stop_reason = "patience"
                break
            restarts_left -= 1
            step_constant *= 0.5
            x, average, t = best_x.copy(), best_x.copy(), 0
            value, grad = f(x)
            reference_iter = iteration

    converged = stop_reason == "patience"
    if not converged:
        message = f"Subgradient budget of {cfg.max_iters} iterations exhausted at objective {best_value:.9f}"
        if cfg.strict:
            raise SolverError(message, stage="minimize_nonsmooth", trace=trace)
        logger.warning(message)

    refined = False
    if 0 < dim <= cfg.refine_max_dim and cfg.refine_iters > 0:
        refined_x, refined_value, steps, certified = _refine_cutting_plane(f, best_x, cfg, trace)
        iteration += steps
        if refined_value < best_value:
            best_x, best_value = refined_x, refined_value
        refined = certified
        logger.debug(f"Cutting-plane refinement: {steps} steps, objective {best_value:.9f}, "
                     f"certified={certified}")
    return NonsmoothResult(x=best_x, value=best_value, trace=trace, iterations=iteration,
                           final_step=float(step), stop_reason=stop_reason, converged=converged,
                           refined=refined)


# ---------------------------------------------------------------------------
# Exact LP form of the MRC objective
# ---------------------------------------------------------------------------

def label_subsets(n_classes: int) -> List[Tuple[int, ...]]:
    """All non-empty label subsets, smallest first"""
    labels = range(n_classes)
    return [c for size in range(1, n_classes + 1) for c in itertools.combinations(labels, size)]


def mrc_lp_reformulation(phi_matrix: np.ndarray,
                         tau: np.ndarray,
                         lam: np.ndarray,
                         labels: Sequence[int],
                         n_classes: int,
                         max_dim: int = MRC_LP_MAX_DIM) -> LinearProgram:
    """
    Linear program whose optimum equals min over mu of the MRC objective

    Variables are [mu_plus (m), mu_minus (m), nu] with mu = mu_plus - mu_minus.
    One epigraph row per training instance and non-empty label subset C:
    nu - (1/|C|) sum_{y in C} Phi(x_i, y)^T mu >= -1/|C|.
    """
    phi_matrix = np.asarray(phi_matrix, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    n, m = phi_matrix.shape
    if m > max_dim:
        raise InvalidArgumentError(
            f"Refusing to build the MRC LP for m={m} features (limit {max_dim}); use a smaller map"
        )
    if m % n_classes != 0:
        raise InvalidArgumentError(f"Feature dimension {m} is not a multiple of {n_classes} classes")
    if labels.shape != (n,):
        raise InvalidArgumentError("Need one label per phi_matrix row")
    tau = np.asarray(tau, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if tau.shape != (m,) or lam.shape != (m,):
        raise InvalidArgumentError("tau and lambda must match the feature dimension")

    k = m // n_classes
    psi = phi_matrix.reshape(n, n_classes, k)[np.arange(n), labels]
    subsets = label_subsets(n_classes)

    rows = np.zeros((n * len(subsets), 2 * m + 1))
    rhs = np.empty(n * len(subsets))
    r = 0
    for i in range(n):
        for subset in subsets:
            size = len(subset)
            for y in subset:
                rows[r, y * k:(y + 1) * k] -= psi[i] / size
            rows[r, m:2 * m] = -rows[r, :m]
            rows[r, -1] = 1.0
            rhs[r] = -1.0 / size
            r += 1

    objective = np.concatenate([lam - tau, lam + tau, [1.0]])
    lower = np.concatenate([np.zeros(2 * m), [-np.inf]])
    names = [f"mup{j}" for j in range(m)] + [f"mum{j}" for j in range(m)] + ["nu"]
    return LinearProgram(objective=objective, A=rows, relations=[Relation.GE] * len(rhs), rhs=rhs,
                         sense=Sense.MIN, lower=lower, offset=1.0, names=names)
