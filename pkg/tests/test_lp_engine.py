import itertools

import numpy as np
import numpy.testing as npt
import pytest
from scipy.optimize import linprog

from modules.lp_engine import (
    LinearProgram,
    LpStatus,
    Relation,
    Sense,
    SolverConfig,
    label_subsets,
    minimize_nonsmooth,
    mrc_lp_reformulation,
    solve_lp,
    write_lp_file,
)
from utils.errors import InvalidArgumentError, SolverError


def _scipy_value(lp: LinearProgram) -> float:
    """Reference optimum from HiGHS"""
    sign = 1.0 if lp.sense is Sense.MIN else -1.0
    le = [i for i, r in enumerate(lp.relations) if r is Relation.LE]
    ge = [i for i, r in enumerate(lp.relations) if r is Relation.GE]
    eq = [i for i, r in enumerate(lp.relations) if r is Relation.EQ]
    A_ub = np.vstack([lp.A[le], -lp.A[ge]]) if le or ge else None
    b_ub = np.concatenate([lp.rhs[le], -lp.rhs[ge]]) if le or ge else None
    result = linprog(
        sign * lp.objective,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=lp.A[eq] if eq else None,
        b_eq=lp.rhs[eq] if eq else None,
        bounds=[(None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi)
                for lo, hi in zip(lp.lower, lp.upper)],
        method="highs",
    )
    assert result.status == 0
    return sign * result.fun + lp.offset


def test_textbook_maximization():
    lp = LinearProgram(
        objective=[3.0, 2.0],
        A=[[1.0, 1.0], [1.0, 3.0], [1.0, 0.0]],
        relations=[Relation.LE] * 3,
        rhs=[4.0, 6.0, 3.0],
        sense=Sense.MAX,
    )
    solution = solve_lp(lp)
    assert solution.optimal
    npt.assert_allclose(solution.x, [3.0, 1.0], atol=1e-9)
    npt.assert_allclose(solution.objective_value, 11.0, rtol=1e-12)
    npt.assert_allclose(solution.dual_objective, 11.0, rtol=1e-9)
    assert solution.max_violation <= 1e-9


def test_equality_free_and_bounded_variables():
    # min x0 - x1 + offset, x0 free, 1 <= x1 <= 2, x0 + x1 = 1, x0 >= -4
    lp = LinearProgram(
        objective=[1.0, -1.0],
        A=[[1.0, 1.0], [1.0, 0.0]],
        relations=[Relation.EQ, Relation.GE],
        rhs=[1.0, -4.0],
        lower=[-np.inf, 1.0],
        upper=[np.inf, 2.0],
        offset=0.5,
    )
    solution = solve_lp(lp)
    assert solution.optimal
    npt.assert_allclose(solution.x, [-1.0, 2.0], atol=1e-9)
    npt.assert_allclose(solution.objective_value, -2.5, atol=1e-9)


def test_infeasible_and_unbounded_are_statuses():
    infeasible = LinearProgram(objective=[1.0], A=[[1.0]], relations=[Relation.LE], rhs=[-1.0])
    assert solve_lp(infeasible).status is LpStatus.INFEASIBLE

    unbounded = LinearProgram(objective=[1.0], A=[[1.0]], relations=[Relation.GE], rhs=[1.0], sense=Sense.MAX)
    assert solve_lp(unbounded).status is LpStatus.UNBOUNDED


def test_redundant_equality_rows():
    lp = LinearProgram(
        objective=[1.0, 2.0, 0.0],
        A=[[1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [1.0, 0.0, 0.0]],
        relations=[Relation.EQ, Relation.EQ, Relation.GE],
        rhs=[1.0, 2.0, 0.25],
    )
    solution = solve_lp(lp)
    assert solution.optimal
    npt.assert_allclose(solution.objective_value, 0.25, atol=1e-9)
    assert solution.max_violation <= 1e-9


def test_degenerate_vertex_terminates():
    # several constraints active at the optimum x = (1, 1)
    lp = LinearProgram(
        objective=[1.0, 1.0],
        A=[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 1.0], [1.0, 2.0]],
        relations=[Relation.LE] * 5,
        rhs=[1.0, 1.0, 2.0, 3.0, 3.0],
        sense=Sense.MAX,
    )
    solution = solve_lp(lp)
    assert solution.optimal
    npt.assert_allclose(solution.objective_value, 2.0, atol=1e-9)


def _random_bounded_program(seed):
    """Six non-negative variables, five inequalities, two equalities and a sum cap"""
    rng = np.random.default_rng(seed)
    n, n_le, n_eq = 6, 5, 2
    x_feasible = rng.random(n)
    A_le = rng.standard_normal((n_le, n))
    A_eq = rng.standard_normal((n_eq, n))
    return LinearProgram(
        objective=rng.standard_normal(n),
        A=np.vstack([A_le, A_eq, np.ones((1, n))]),
        relations=[Relation.LE] * n_le + [Relation.EQ] * n_eq + [Relation.LE],
        rhs=np.concatenate([A_le @ x_feasible + rng.random(n_le), A_eq @ x_feasible, [n + 1.0]]),
        sense=Sense.MAX if seed % 2 else Sense.MIN,
    )


def _vertex_value(lp: LinearProgram) -> float:
    """Best objective over every basic feasible solution, by exhaustive enumeration"""
    n = lp.n_vars
    eq = [i for i, r in enumerate(lp.relations) if r is Relation.EQ]
    le = [i for i, r in enumerate(lp.relations) if r is Relation.LE]
    # inequality rows first, then the non-negativity bounds x_j >= 0
    rows = np.vstack([lp.A[le], -np.eye(n)])
    rhs = np.concatenate([lp.rhs[le], np.zeros(n)])
    sign = 1.0 if lp.sense is Sense.MIN else -1.0
    best = np.inf
    for active in itertools.combinations(range(len(rows)), n - len(eq)):
        system = np.vstack([lp.A[eq], rows[list(active)]])
        if abs(np.linalg.det(system)) < 1e-10:
            continue
        x = np.linalg.solve(system, np.concatenate([lp.rhs[eq], rhs[list(active)]]))
        if np.all(rows @ x <= rhs + 1e-9):
            best = min(best, sign * float(lp.objective @ x))
    assert np.isfinite(best)
    return sign * best + lp.offset


@pytest.mark.parametrize("seed", range(20))
def test_random_programs_match_vertex_enumeration(seed):
    lp = _random_bounded_program(seed)
    solution = solve_lp(lp)
    assert solution.optimal
    npt.assert_allclose(solution.objective_value, _vertex_value(lp), atol=1e-8)
    npt.assert_allclose(solution.dual_objective, solution.objective_value, atol=1e-7)
    assert solution.max_violation <= 1e-8


@pytest.mark.parametrize("seed", range(12))
def test_random_programs_match_highs(seed):
    lp = _random_bounded_program(100 + seed)
    solution = solve_lp(lp)
    assert solution.optimal
    npt.assert_allclose(solution.objective_value, _scipy_value(lp), atol=1e-7)
    npt.assert_allclose(solution.dual_objective, solution.objective_value, atol=1e-7)
    assert solution.max_violation <= 1e-8


def test_lp_validation():
    with pytest.raises(InvalidArgumentError):
        LinearProgram(objective=[1.0, 1.0], A=[[1.0, 1.0]], relations=[Relation.LE, Relation.LE], rhs=[1.0])
    with pytest.raises(InvalidArgumentError):
        LinearProgram(objective=[1.0], A=[[np.nan]], relations=[Relation.LE], rhs=[1.0])
    with pytest.raises(InvalidArgumentError):
        LinearProgram(objective=[1.0], A=[[1.0]], relations=[Relation.LE], rhs=[1.0], lower=[2.0], upper=[1.0])


def test_write_lp_file(tmp_path):
    lp = LinearProgram(
        objective=[1.0, -2.0],
        A=[[1.0, 1.0]],
        relations=[Relation.EQ],
        rhs=[1.0],
        sense=Sense.MAX,
        lower=[0.0, -np.inf],
        names=["p0", "nu"],
    )
    path = write_lp_file(lp, tmp_path / "lp" / "test.lp")
    text = path.read_text(encoding="utf-8")
    assert text.splitlines()[1] == "Maximize"
    assert " obj: + 1 p0 - 2 nu" in text
    assert " c0: + 1 p0 + 1 nu = 1" in text
    assert " nu free" in text
    assert text.rstrip().endswith("End")


def test_label_subsets():
    subsets = label_subsets(3)
    assert len(subsets) == 7
    assert subsets[0] == (0,) and subsets[-1] == (0, 1, 2)


def test_mrc_reformulation_refuses_large_maps():
    with pytest.raises(InvalidArgumentError):
        mrc_lp_reformulation(np.zeros((3, 402)), np.zeros(402), np.zeros(402), [0, 1, 0], 2)


def _l1_distance(target):
    def f(x):
        return float(np.abs(x - target).sum()), np.sign(x - target)
    return f


def test_minimize_nonsmooth_converges_on_l1():
    target = np.array([0.5, -0.25, 1.0])
    cfg = SolverConfig(max_iters=20000, step_constant=0.5, patience=300, tolerance=1e-8, restarts=8)
    result = minimize_nonsmooth(_l1_distance(target), 3, cfg)
    assert result.value <= 1e-2
    assert np.all(np.diff(result.trace) <= 0)
    assert result.iterations == len(result.trace)


def _abs(x):
    return float(abs(x[0])), np.sign(x)


def _three_pieces(x):
    pieces = np.array([x[0], -x[0], x[0] - 0.5])
    slopes = np.array([1.0, -1.0, 1.0])
    i = int(np.argmax(pieces))
    return float(pieces[i]), slopes[i:i + 1]


@pytest.mark.parametrize("f", [_abs, _three_pieces])
def test_one_dimensional_kinks(f):
    result = minimize_nonsmooth(f, 1, SolverConfig(max_iters=2000, patience=100), x0=np.array([0.8]))
    assert abs(result.x[0]) <= 1e-3
    assert result.value <= 1e-3


def test_minimize_nonsmooth_budget(caplog):
    target = np.array([5.0, 5.0])
    lenient = SolverConfig(max_iters=5, patience=100, restarts=0)
    with caplog.at_level("WARNING"):
        result = minimize_nonsmooth(_l1_distance(target), 2, lenient)
    assert not result.converged
    assert result.stop_reason == "max_iters"
    assert "exhausted" in caplog.text

    strict = SolverConfig(max_iters=5, patience=100, restarts=0, strict=True)
    with pytest.raises(SolverError) as excinfo:
        minimize_nonsmooth(_l1_distance(target), 2, strict)
    assert len(excinfo.value.trace) == 5


def test_solver_config_validation():
    with pytest.raises(InvalidArgumentError):
        SolverConfig(max_iters=0)
    with pytest.raises(InvalidArgumentError):
        SolverConfig(method="newton")
    with pytest.raises(InvalidArgumentError):
        SolverConfig(refine_max_dim=-1)
    with pytest.raises(InvalidArgumentError):
        SolverConfig(refine_iters=-5)


def _polyhedral(seed, n_pieces=6, dim=3):
    """max_i (a_i^T x + b_i) + |x|_1 with |a_i| < 1, bounded below"""
    rng = np.random.default_rng(seed)
    a = rng.uniform(-0.8, 0.8, size=(n_pieces, dim))
    b = rng.standard_normal(n_pieces)

    def f(x):
        values = a @ x + b
        i = int(np.argmax(values))
        return float(values[i] + np.abs(x).sum()), a[i] + np.sign(x)
    return f, a, b


def _polyhedral_minimum(a, b):
    # min t + sum u over (x, t, u): a_i x + b_i <= t, -u <= x <= u
    n_pieces, dim = a.shape
    eye = np.eye(dim)
    A_ub = np.vstack([
        np.hstack([a, -np.ones((n_pieces, 1)), np.zeros((n_pieces, dim))]),
        np.hstack([eye, np.zeros((dim, 1)), -eye]),
        np.hstack([-eye, np.zeros((dim, 1)), -eye]),
    ])
    b_ub = np.concatenate([-b, np.zeros(2 * dim)])
    cost = np.concatenate([np.zeros(dim), [1.0], np.ones(dim)])
    result = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * (dim + 1) + [(0, None)] * dim,
                     method="highs")
    assert result.status == 0
    return result.fun


@pytest.mark.parametrize("seed", range(5))
def test_refinement_reaches_polyhedral_minimum(seed):
    f, a, b = _polyhedral(seed)
    cfg = SolverConfig(max_iters=5, patience=100, restarts=0, tolerance=1e-9)
    result = minimize_nonsmooth(f, 3, cfg)
    assert result.refined
    assert result.stop_reason == "max_iters"
    npt.assert_allclose(result.value, _polyhedral_minimum(a, b), atol=1e-6)
    assert result.iterations == len(result.trace)
    assert np.all(np.diff(result.trace) <= 0)


def test_refinement_can_be_disabled():
    f, a, b = _polyhedral(0)
    cfg = SolverConfig(max_iters=5, patience=100, restarts=0, refine_max_dim=0)
    result = minimize_nonsmooth(f, 3, cfg)
    assert not result.refined
    assert len(result.trace) == 5
