import json

import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from config import ExperimentConfig
from modules.experiment import SpectreExperiment
from modules.mrc_core import MrcModel, train
from modules.tuner import build_map
from utils.errors import DataError, InvalidArgumentError
from utils.storage import dumps_json

ARTIFACTS = {"model.json", "report.json", "grid_records.csv", "bounds.csv", "bounds.json",
             "extremal.csv", "decision_grid.csv", "train.csv", "schema.json"}


@pytest.fixture
def config(small_config):
    return ExperimentConfig.from_dict(small_config).validate()


@pytest.fixture
def finished_run(config):
    experiment = SpectreExperiment(config)
    return experiment, experiment.run()


def test_run_writes_every_artifact(finished_run):
    experiment, report = finished_run
    assert ARTIFACTS <= set(experiment.store.list_artifacts())

    grid = pd.read_csv(experiment.store.output_dir / "grid_records.csv")
    assert list(grid["stage"]) == ["sigma", "sigma", "lambda0", "lambda0"]

    decision = pd.read_csv(experiment.store.output_dir / "decision_grid.csv")
    assert len(decision) == 36
    assert decision["max_probability"].between(0.0, 1.0).all()

    overall = report.bounds["at_model_lambda0"]["overall"]
    assert overall["lower"] <= overall["empirical_error"] + 1e-9
    assert overall["empirical_error"] <= overall["upper"] + 1e-9
    assert {row["value"] for row in report.bounds["sweep"]} == {0.1, 1.0}

    saved = json.loads((experiment.store.output_dir / "report.json").read_text(encoding="utf-8"))
    assert saved["schema_version"] == 1
    assert saved["lambda0_star"] == report.lambda0_star
    assert "tune" in saved["timings"]


def test_runs_are_reproducible(config):
    first = SpectreExperiment(config).run()
    second = SpectreExperiment(config).run()
    assert dumps_json(first.to_dict(include_timings=False)) == dumps_json(second.to_dict(include_timings=False))


def test_saved_model_reproduces_training_metrics(finished_run):
    experiment, report = finished_run
    out = experiment.store.output_dir
    model = MrcModel.from_dict(json.loads((out / "model.json").read_text(encoding="utf-8")))
    metrics = experiment.evaluate_file(model, str(out / "train.csv"))
    assert metrics["n"] == report.train_metrics["n"]
    assert metrics["accuracy"] == pytest.approx(report.train_metrics["accuracy"])
    assert metrics["worst_group_accuracy"] == pytest.approx(report.train_metrics["worst_group_accuracy"])
    assert metrics["group_accuracies"] == pytest.approx(report.train_metrics["group_accuracies"])


def test_held_out_files_must_match_the_model(finished_run, tmp_path):
    experiment, _ = finished_run
    out = experiment.store.output_dir
    model = MrcModel.from_dict(json.loads((out / "model.json").read_text(encoding="utf-8")))

    unlabeled = tmp_path / "unlabeled.csv"
    pd.read_csv(out / "train.csv").drop(columns=["y", "s"]).head(7).to_csv(unlabeled, index=False)
    with pytest.raises(DataError, match="Label column"):
        experiment.evaluate_file(model, str(unlabeled))

    predictions = experiment.predict_file(model, str(unlabeled))
    assert list(predictions["row"]) == list(range(7))
    proba = predictions[[c for c in predictions.columns if c.startswith("probability_")]].to_numpy()
    npt.assert_allclose(proba.sum(axis=1), 1.0)

    wrong = tmp_path / "wrong.csv"
    pd.DataFrame({"x1": [0.0], "z": [1.0]}).to_csv(wrong, index=False)
    with pytest.raises(DataError):
        experiment.predict_file(model, str(wrong))


def test_bounds_for_saved_model(finished_run):
    experiment, report = finished_run
    section = experiment.bounds_for_model(MrcModel.from_dict(report.model))
    assert section["at_model_lambda0"]["overall"]["upper"] == pytest.approx(
        report.bounds["at_model_lambda0"]["overall"]["upper"])


def test_lambda0_sweep(config):
    table = SpectreExperiment(config).sweep("lambda0", values=[0.1, 1.0], seeds=[0, 1])
    assert len(table) == 4
    assert list(table["seed"]) == [0, 0, 1, 1]
    ok = table[~table["failed"].astype(bool)]
    assert ok["accuracy"].between(0.0, 1.0).all()


def test_sweep_parameters_are_checked(config):
    with pytest.raises(InvalidArgumentError):
        SpectreExperiment(config).sweep("D")
    polynomial = config.with_overrides({"map.kind": "polynomial"}).validate()
    with pytest.raises(InvalidArgumentError):
        SpectreExperiment(polynomial).sweep("sigma")


def test_repeats_are_aggregated(small_config):
    small_config["repeats"] = 2
    small_config["bounds"]["enabled"] = False
    report = SpectreExperiment(ExperimentConfig.from_dict(small_config).validate()).run()
    assert len(report.repeats["runs"]) == 2
    assert [run["seed"] for run in report.repeats["runs"]] == [0, 1]
    accuracies = [run["accuracy"] for run in report.repeats["runs"]]
    assert report.repeats["mean"]["accuracy"] == pytest.approx(np.mean(accuracies))
    assert report.repeats["std"]["accuracy"] == pytest.approx(np.std(accuracies, ddof=1))
    assert report.bounds is None


@pytest.mark.slow
def test_tuned_sigma_beats_the_grid_endpoints(tmp_path):
    config = ExperimentConfig().with_overrides({"output_dir": str(tmp_path / "out")}).validate()
    experiment = SpectreExperiment(config)
    tune_cfg = config.tune_config()
    tuned, smallest, largest, flip_rates, majority = [], [], [], [], []

    for seed in range(10):
        train_ds, val, test = experiment.prepare(experiment.load_data(seed), seed)
        result = experiment.tune_and_train(train_ds, val, persist=False)
        metrics = experiment.evaluate(result.final_model, test, seed)
        tuned.append(metrics["worst_group_accuracy"])
        majority_name = test.group_names[int(np.bincount(test.sensitive).argmax())]
        majority.append(metrics["group_accuracies"][majority_name])

        blind = train_ds.without_sensitive()
        for sigma, sink in ((result.sigma_values[0], smallest), (result.sigma_values[-1], largest)):
            model = train(blind, build_map(tune_cfg, 2, 2, sigma), tune_cfg.lambda0_init, config.solver_config())
            sink.append(experiment.evaluate(model, test, seed)["worst_group_accuracy"])
            if sink is smallest:
                flipped = test.features.copy()
                flipped[:, 1] = -flipped[:, 1]
                flip_rates.append(float(np.mean(model.predict(flipped) != model.predict(test.features))))

    assert np.median(tuned) >= np.median(smallest) + 0.05
    assert np.median(tuned) >= np.median(largest) + 0.05
    # the low-frequency boundary depends almost only on x1
    assert np.mean(flip_rates) < 0.10
    assert min(majority) >= 0.9
