from pathlib import Path

import pytest

from config import ExperimentConfig
from modules.tuner import Strategy
from utils.errors import ConfigError

REPO_ROOT = Path(__file__).resolve().parent.parent


def test_defaults_are_valid():
    config = ExperimentConfig().validate()
    assert config.data.source == "toy"
    assert config.map.D == 600
    assert config.tune_config().strategy is Strategy.WCE
    assert config.split_seed == config.map_seed == 0


def test_reference_config_loads():
    config = ExperimentConfig.from_yaml(str(REPO_ROOT / "configs" / "toy.yaml")).validate()
    assert config.data.sensitive_columns == ["s"]
    assert config.bounds.lambda0_grid == [0.1, 0.5, 1.0, 5.0]


def test_unknown_keys_are_rejected(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("tune:\n  stratgy: ACC\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="tune.stratgy"):
        ExperimentConfig.from_yaml(str(path))


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(str(tmp_path / "missing.yaml"))
    path = tmp_path / "broken.yaml"
    path.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(str(path))


def test_relative_data_path_resolves_against_the_config(tmp_path):
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "train.csv").write_text("x,y\n1,0\n", encoding="utf-8")
    path = tmp_path / "config.yaml"
    path.write_text("data:\n  source: csv\n  path: data/train.csv\n", encoding="utf-8")
    config = ExperimentConfig.from_yaml(str(path)).validate()
    assert Path(config.data.path) == (tmp_path / "data" / "train.csv").resolve()


def test_dotted_overrides():
    config = ExperimentConfig().with_overrides({"tune.strategy": "ACC", "seed": 4, "map.D": None})
    assert config.tune.strategy == "ACC"
    assert config.seed == 4 and config.split_seed == 4
    assert config.map.D == 600
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides({"tune.nope": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides({"nope.strategy": 1})


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("SPECTRE_OUTPUT_DIR", "/tmp/spectre-out")
    monkeypatch.setenv("SPECTRE_MAX_WORKERS", "3")
    monkeypatch.setenv("SPECTRE_SEED", "9")
    config = ExperimentConfig().apply_env()
    assert (config.output_dir, config.max_workers, config.seed) == ("/tmp/spectre-out", 3, 9)

    monkeypatch.setenv("SPECTRE_SEED", "nine")
    with pytest.raises(ConfigError):
        ExperimentConfig().apply_env()


@pytest.mark.parametrize("overrides", [
    {"tune.sigma_values": []},
    {"tune.lambda_values": []},
    {"tune.strategy": "BEST"},
    {"data.source": "parquet"},
    {"data.source": "csv"},
    {"map.kind": "wavelet"},
    {"bounds.audit_fraction": 0.0},
    {"bounds.tau_source": "test"},
    {"data.sensitive_columns": []},
    {"prediction_rule": "sometimes"},
    {"split.test_fraction": 1.5},
    {"repeats": 0},
])
def test_invalid_settings(overrides):
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(overrides).validate()


def test_overall_bounds_without_sensitive_columns_are_valid():
    config = ExperimentConfig().with_overrides({"data.sensitive_columns": [], "bounds.group_bounds": False})
    config.validate()


def test_fingerprint_tracks_the_effective_config():
    a = ExperimentConfig()
    assert a.fingerprint() == ExperimentConfig().fingerprint()
    assert a.fingerprint() != a.with_overrides({"seed": 1}).fingerprint()
    assert len(a.fingerprint()) == 12


def test_runtime_objects_carry_the_settings():
    config = ExperimentConfig().with_overrides({
        "solver.method": "lp", "solver.max_iters": 50, "map.kind": "polynomial", "map.degree": 3,
        "tune.lambda_values": [0.2], "seed": 2, "map.seed": 7,
    })
    solver = config.solver_config()
    assert (solver.method, solver.max_iters, solver.seed) == ("lp", 50, 2)
    tune_cfg = config.tune_config()
    assert (tune_cfg.map_kind, tune_cfg.degree, tune_cfg.seed) == ("polynomial", 3, 7)
    assert tune_cfg.lambda_values == [0.2]


def test_strategy_members_pass_validation():
    config = ExperimentConfig().with_overrides({"tune.strategy": Strategy.ACC,
                                                "tune.sigma_strategy": Strategy.WCE}).validate()
    tune_cfg = config.tune_config()
    assert tune_cfg.strategy is Strategy.ACC
    assert tune_cfg.sigma_strategy is Strategy.WCE
