import itertools

import numpy as np
import numpy.testing as npt
import pytest

from modules.dataset import Dataset
from modules.lp_engine import SolverConfig
from modules.mrc_core import (
    RANDOMIZED,
    MrcModel,
    MrcObjective,
    build_uncertainty,
    max_subset_score,
    objective_value,
    randomized_rule,
    train,
)
from modules.spectral_map import polynomial_map, sample_map
from utils.errors import InvalidArgumentError, SolverError

LP = SolverConfig(method="lp")


def _brute_force_phi(scores):
    best = np.full(scores.shape[0], -np.inf)
    n_classes = scores.shape[1]
    for size in range(1, n_classes + 1):
        for subset in itertools.combinations(range(n_classes), size):
            best = np.maximum(best, (scores[:, list(subset)].sum(axis=1) - 1.0) / size)
    return best


def test_max_subset_score_matches_enumeration():
    scores = np.random.default_rng(0).standard_normal((50, 4)) * 2.0
    npt.assert_allclose(max_subset_score(scores), _brute_force_phi(scores), rtol=1e-12, atol=1e-12)


def test_randomized_rule_is_a_distribution():
    scores = np.random.default_rng(1).standard_normal((40, 3))
    proba = randomized_rule(scores)
    assert np.all(proba >= 0)
    npt.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-12)
    npt.assert_array_equal(np.argmax(proba, axis=1), np.argmax(scores, axis=1))


def test_randomized_rule_at_zero_scores_is_uniform():
    npt.assert_allclose(randomized_rule(np.zeros((2, 4))), 0.25)


def test_uncertainty_set_moments():
    phi = np.random.default_rng(2).standard_normal((25, 6))
    U = build_uncertainty(phi, 0.5)
    npt.assert_allclose(U.tau, phi.mean(axis=0))
    npt.assert_allclose(U.lam, 0.5 * np.sqrt(phi.var(axis=0) / 25))
    assert U.contains(np.full(25, 1 / 25))
    assert not U.contains(np.eye(25)[0])
    with pytest.raises(InvalidArgumentError):
        build_uncertainty(phi, -0.1)
    with pytest.raises(InvalidArgumentError):
        build_uncertainty(phi[:1], 0.5)


def test_objective_at_zero_is_the_uniform_rule_risk(make_problem):
    ds = make_problem(0, n=20, n_classes=3, groups=False)
    spectral = sample_map(2, 4, 1.0, 3, seed=0)
    U = build_uncertainty(spectral.apply_batch(ds), 0.3)
    objective = MrcObjective(spectral.base_features(ds.features), U, 3)
    npt.assert_allclose(objective.value(np.zeros(spectral.m)), 1.0 - 1.0 / 3, rtol=1e-12)


def test_objective_subgradient_inequality(make_problem):
    ds = make_problem(1, n=30, groups=False)
    spectral = sample_map(2, 5, 1.0, 2, seed=1)
    U = build_uncertainty(spectral.apply_batch(ds), 0.4)
    objective = MrcObjective(spectral.base_features(ds.features), U, 2)
    rng = np.random.default_rng(3)
    for _ in range(50):
        mu, other = rng.standard_normal(spectral.m), rng.standard_normal(spectral.m)
        value, grad = objective(mu)
        assert objective.value(other) >= value + grad @ (other - mu) - 1e-10


def test_separable_line_has_zero_error_and_small_risk():
    X = np.concatenate([np.full(50, -1.0), np.full(50, 1.0)])[:, None]
    y = np.concatenate([np.zeros(50, dtype=np.int64), np.ones(50, dtype=np.int64)])
    ds = Dataset(features=X, labels=y)
    model = train(ds, polynomial_map(1, 1, 2), 0.01, LP)
    assert np.all(model.predict(X) == y)
    assert model.worst_case_risk <= 0.1


def test_lp_training_reports_the_objective(make_problem):
    ds = make_problem(2, n=25, groups=False)
    model = train(ds, polynomial_map(2, 1, 2), 0.5, LP)
    assert model.solver_meta["method"] == "lp"
    npt.assert_allclose(objective_value(model, ds), model.worst_case_risk, atol=1e-8)
    assert model.worst_case_risk <= 0.5 + 1e-9


def _solver_matches_lp(ds, lambda0):
    spectral = polynomial_map(2, 1, 2)
    exact = train(ds, spectral, lambda0, LP)
    cfg = SolverConfig(max_iters=20000, patience=500, tolerance=1e-7, restarts=4, refine_iters=600)
    approx = train(ds, spectral, lambda0, cfg)
    assert approx.solver_meta["refined"]
    assert approx.worst_case_risk >= exact.worst_case_risk - 1e-7
    assert approx.worst_case_risk - exact.worst_case_risk <= 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_subgradient_solver_matches_lp(make_problem, seed):
    rng = np.random.default_rng(seed)
    _solver_matches_lp(make_problem(100 + seed, n=int(rng.integers(20, 31)), groups=False),
                       float(rng.uniform(0.25, 1.0)))


def test_solver_leaves_the_zero_point_when_the_optimum_is_close_to_it(make_problem):
    # optimum 0.498 against 0.5 at mu = 0
    _solver_matches_lp(make_problem(102, n=25, groups=False), 1.0)


def test_training_is_blind_and_validates(make_problem):
    ds = make_problem(3, n=20)
    spectral = polynomial_map(2, 1, 2)
    with_groups = train(ds, spectral, 0.3, LP)
    without = train(ds.without_sensitive(), spectral, 0.3, LP)
    npt.assert_array_equal(with_groups.mu, without.mu)

    single = Dataset(features=ds.features, labels=np.zeros(ds.n_samples, dtype=np.int64), label_names=("0", "1"))
    with pytest.raises(InvalidArgumentError):
        train(single, spectral, 0.3, LP)
    with pytest.raises(InvalidArgumentError):
        train(ds, polynomial_map(3, 1, 2), 0.3, LP)


def test_strict_budget_raises(make_problem):
    ds = make_problem(4, n=20, groups=False)
    with pytest.raises(SolverError):
        train(ds, sample_map(2, 5, 1.0, 2, seed=0), 0.3, SolverConfig(max_iters=3, strict=True))


def test_prediction_rules(make_problem):
    ds = make_problem(5, n=30, groups=False)
    model = train(ds, polynomial_map(2, 1, 2), 0.3, LP)
    proba = model.predict_proba(ds.features)
    npt.assert_allclose(proba.sum(axis=1), 1.0)

    deterministic = model.expected_losses(ds.features, ds.labels)
    npt.assert_array_equal(deterministic, (model.predict(ds.features) != ds.labels).astype(float))
    model.prediction_rule = RANDOMIZED
    randomized = model.expected_losses(ds.features, ds.labels)
    npt.assert_allclose(randomized, 1.0 - proba[np.arange(ds.n_samples), ds.labels])

    npt.assert_array_equal(model.sample_predict(ds.features, seed=3), model.sample_predict(ds.features, seed=3))


def test_sampled_labels_follow_the_rule():
    spectral = polynomial_map(1, 1, 2)
    model = MrcModel(mu=np.array([0.0, 0.0, 0.2, 0.0]), map=spectral, lambda0=0.1, worst_case_risk=0.5)
    X = np.zeros((20000, 1))
    proba = model.predict_proba(X[:1])[0]
    draws = model.sample_predict(X, seed=0)
    npt.assert_allclose(np.mean(draws == 1), proba[1], atol=0.015)


def test_zero_coefficients_break_ties_to_smallest_label():
    model = MrcModel(mu=np.zeros(6), map=polynomial_map(2, 1, 2), lambda0=0.1, worst_case_risk=0.5)
    npt.assert_array_equal(model.predict(np.ones((3, 2))), 0)


def test_model_descriptor_preserves_predictions(make_problem):
    ds = make_problem(6, n=30, groups=False)
    model = train(ds, sample_map(2, 8, 0.9, 2, seed=2), 0.3, SolverConfig(max_iters=300, patience=50))
    rebuilt = MrcModel.from_dict(model.to_dict())
    npt.assert_array_equal(rebuilt.predict(ds.features), model.predict(ds.features))
    npt.assert_array_equal(rebuilt.predict_proba(ds.features), model.predict_proba(ds.features))
    with pytest.raises(InvalidArgumentError):
        MrcModel.from_dict({"map": model.map.to_dict()})
