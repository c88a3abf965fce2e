"""
Shared fixtures: toy splits, small random problems and a fast experiment config
"""
import numpy as np
import pytest
import yaml

from modules.dataset import Dataset, SplitSpec, generate_toy, split, standardize_split
from modules.lp_engine import SolverConfig


def random_problem(seed: int, n: int = 30, d: int = 2, n_classes: int = 2, groups: bool = True) -> Dataset:
    """Gaussian features with labels drawn from a noisy linear score"""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    weights = rng.standard_normal((d, n_classes))
    logits = X @ weights + 0.7 * rng.standard_normal((n, n_classes))
    y = np.argmax(logits, axis=1)
    # every class present
    y[:n_classes] = np.arange(n_classes)
    sensitive = None
    if groups:
        sensitive = (rng.random(n) < 0.6).astype(np.int64)
        sensitive[:2] = [0, 1]
    return Dataset(features=X, labels=y.astype(np.int64), sensitive=sensitive)


@pytest.fixture
def make_problem():
    return random_problem


@pytest.fixture
def toy_parts():
    """Standardized (train, val, test) of a 400-row toy sample"""
    ds = generate_toy(400, seed=0)
    train_ds, val, test = split(ds, SplitSpec(seed=0))
    return standardize_split(train_ds, val, test)


@pytest.fixture
def fast_solver():
    return SolverConfig(max_iters=400, patience=80, restarts=1)


@pytest.fixture
def small_config(tmp_path):
    """Nested config mapping for a pipeline run that finishes in seconds"""
    return {
        "data": {"source": "toy", "n": 240},
        "map": {"D": 20},
        "tune": {"n_sigma": 2, "lambda_values": [0.1, 0.5]},
        "solver": {"max_iters": 300, "patience": 50, "restarts": 1},
        "bounds": {"lambda0_grid": [0.1, 1.0], "max_features": 40, "min_group_size": 5},
        "decision_grid_resolution": 6,
        "output_dir": str(tmp_path / "out"),
    }


@pytest.fixture
def small_config_file(tmp_path, small_config):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(small_config), encoding="utf-8")
    return path
