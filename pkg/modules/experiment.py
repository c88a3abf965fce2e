"""
Experiment Module
Runs the SPECTRE pipeline end to end and writes its artifacts
"""
import logging
import re
import time
from contextlib import contextmanager
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy
import sklearn

from config import ExperimentConfig
from modules.dataset import (
    Dataset,
    Standardization,
    csv_columns,
    generate_toy,
    load_csv,
    load_features,
    split,
    standardize_split,
)
from modules.fairness_metrics import GroupedPredictions, metrics_summary, per_class_error
from modules.guarantees import (
    LOWER,
    UPPER,
    GuaranteeReport,
    bound_sweep,
    compute_bounds,
    extremal_report,
    group_bound_lp,
    overall_bound_lp,
    select_audit_indices,
)
from modules.lp_engine import write_lp_file
from modules.mrc_core import RANDOMIZED, MrcModel, train
from modules.schema import ReportSchema, RunReport
from modules.spectral_map import POLYNOMIAL, sigma_grid, sigma_scale
from modules.tuner import CandidateMetrics, TuneResult, build_map, tune
from utils.errors import ConfigError, DataError, InvalidArgumentError, SpectreError
from utils.storage import ArtifactStore

logger = logging.getLogger(__name__)

PERCENT_KEYS = ("accuracy", "worst_group_accuracy", "max_acc_disparity", "eop", "dp")
AGGREGATE_KEYS = PERCENT_KEYS + ("worst_class_error",)


def library_versions() -> Dict[str, str]:
    return {
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "scikit-learn": sklearn.__version__,
    }


def replay_standardization(model: MrcModel, ds: Dataset) -> Dataset:
    """Apply the z-score transform the model was trained with"""
    feature_names = model.metadata.get("feature_names")
    if feature_names and tuple(feature_names) != tuple(ds.feature_names):
        raise DataError(f"Data columns {list(ds.feature_names)} do not match the model's {feature_names}")
    params = model.metadata.get("standardization")
    if params is None:
        return ds
    transform = Standardization.from_dict(params)
    return replace(ds, features=transform.apply(ds.features), standardization=transform)


def _records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    return frame.astype(object).where(frame.notna(), None).to_dict(orient="records")


def _file_stem(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


class SpectreExperiment:
    """Splits, tunes, evaluates and audits one experiment configuration"""

    def __init__(self, config: ExperimentConfig, store: Optional[ArtifactStore] = None):
        self.config = config
        self.store = store or ArtifactStore(config.output_dir)
        self.schema = ReportSchema()
        self.run_id = config.fingerprint()
        self.timings: Dict[str, float] = {}
        self._csv_cache: Optional[Dataset] = None

    @contextmanager
    def _stage(self, name: str):
        """Time a pipeline stage and tag errors raised inside it"""
        start = time.perf_counter()
        logger.info(f"Stage '{name}' started")
        try:
            yield
        except SpectreError as e:
            if e.stage is None:
                e.stage = name
            raise
        finally:
            self.timings[name] = round(self.timings.get(name, 0.0) + time.perf_counter() - start, 6)

    # ------------------------------------------------------------------
    # Data
    # ------------------------------------------------------------------

    def repeat_seeds(self, repeat: int) -> Tuple[int, int]:
        """(data seed, split seed) of one repeat"""
        return self.config.seed + repeat, self.config.split_seed + repeat

    def load_data(self, seed: Optional[int] = None) -> Dataset:
        """Toy sample for the given seed, or the configured CSV (read once)"""
        data = self.config.data
        if data.source == "toy":
            return generate_toy(data.n, self.config.seed if seed is None else seed)
        if self._csv_cache is None:
            self._csv_cache = load_csv(
                data.path,
                data.label_column,
                sensitive_column=data.sensitive_columns or None,
                exclude_columns=data.exclude_columns,
            )
        return self._csv_cache

    def prepare(self, ds: Dataset, split_seed: int) -> Tuple[Dataset, Dataset, Dataset]:
        """Split, then standardize every part with the training statistics"""
        train_ds, val, test = split(ds, self.config.split_spec(split_seed))
        return standardize_split(train_ds, val, test)

    def load_for_model(self, model: MrcModel, path: str, require_labels: bool = True) -> Dataset:
        """
        Load a held-out CSV in the model's encoding

        Feature columns are taken by name, so extra columns are ignored. Sensitive
        columns are read when the file has them.
        """
        meta = model.metadata
        feature_names = meta.get("feature_names")
        label_names = meta.get("label_names")
        if not feature_names or not label_names:
            raise InvalidArgumentError("Model file carries no feature or label names; retrain with this version")
        label_column = meta.get("label_column", self.config.data.label_column)
        columns = csv_columns(path)
        if require_labels and label_column not in columns:
            raise DataError(f"Label column '{label_column}' the model was trained with is not in {path}")
        sensitive = [c for c in meta.get("sensitive_columns", []) if c in columns]
        if meta.get("sensitive_columns") and len(sensitive) != len(meta["sensitive_columns"]):
            logger.warning(f"Sensitive columns {meta['sensitive_columns']} not all present in {path}; "
                           "group metrics are skipped")
            sensitive = []
        ds = load_csv(path, label_column, sensitive_column=sensitive or None,
                      feature_columns=feature_names, label_names=label_names)
        return replay_standardization(model, ds)

    # ------------------------------------------------------------------
    # Training and evaluation
    # ------------------------------------------------------------------

    def _grid_frame(self, records: Sequence[CandidateMetrics]) -> pd.DataFrame:
        rows = []
        for record in records:
            row = record.to_dict()
            row["class_errors"] = ";".join(f"{e:.17g}" for e in record.class_errors)
            rows.append(row)
        return self.schema.conform("grid_records", pd.DataFrame(rows))

    def _annotate(self, model: MrcModel):
        model.prediction_rule = self.config.prediction_rule
        model.metadata.update({
            "label_column": self.config.data.label_column,
            "sensitive_columns": list(self.config.data.sensitive_columns),
            "data_source": self.config.data.source,
        })

    def tune_and_train(self, train_ds: Dataset, val: Dataset, persist: bool = True) -> TuneResult:
        """
        Two-stage tuning on the blind training and validation parts

        Args:
            train_ds: Standardized training part
            val: Standardized validation part
            persist: Checkpoint the grid table after each stage

        Returns:
            TuneResult with an annotated final model
        """
        def checkpoint(records: List[CandidateMetrics]):
            if not persist:
                return
            self.store.write_checkpoint(self.run_id, {
                "stage": "tune",
                "grid_records": [r.to_dict() for r in records],
            })
            self.store.write_csv("grid_records.csv", self._grid_frame(records))

        result = tune(train_ds, val, self.config.tune_config(), on_stage_complete=checkpoint)
        self._annotate(result.final_model)
        return result

    def positive_label(self, label_names: Sequence[str]) -> int:
        """Label id treated as positive by EOp and DP, the last label by default"""
        name = self.config.data.positive_label
        if name is None:
            return len(label_names) - 1
        if name not in label_names:
            raise ConfigError(f"data.positive_label '{name}' is not one of the labels {list(label_names)}")
        return list(label_names).index(name)

    def predict_labels(self, model: MrcModel, X: np.ndarray, seed: int) -> np.ndarray:
        if model.prediction_rule == RANDOMIZED:
            return model.sample_predict(X, seed)
        return model.predict(X)

    def evaluate(self, model: MrcModel, ds: Dataset, seed: Optional[int] = None) -> Dict[str, Any]:
        """Accuracy and per-class error, plus group metrics when ds has group ids"""
        seed = self.config.seed if seed is None else seed
        predictions = self.predict_labels(model, ds.features, seed)
        n_classes = len(ds.label_names)
        if ds.has_sensitive:
            gp = GroupedPredictions(
                y_true=ds.labels,
                y_pred=predictions,
                groups=ds.sensitive,
                positive_label=self.positive_label(ds.label_names),
                group_names=ds.group_names,
            )
            summary = metrics_summary(gp, n_classes)
        else:
            class_errors = per_class_error(ds.labels, predictions, n_classes)
            summary = {
                "n": ds.n_samples,
                "accuracy": float(np.mean(predictions == ds.labels)),
                "class_errors": {str(k): v for k, v in class_errors.items()},
                "worst_class_error": max(class_errors.values()),
            }
        summary["percent"] = {k: 100.0 * summary[k] for k in PERCENT_KEYS if k in summary}
        return summary

    def evaluate_file(self, model: MrcModel, path: str) -> Dict[str, Any]:
        ds = self.load_for_model(model, path)
        logger.info(f"Evaluating model on {ds.n_samples} rows of {path}")
        return self.evaluate(model, ds)

    def predict_file(self, model: MrcModel, path: str, seed: Optional[int] = None) -> pd.DataFrame:
        """Predicted label names and per-label probabilities for every row of an unlabeled CSV"""
        feature_names = model.metadata.get("feature_names")
        label_names = model.metadata.get("label_names") or [str(k) for k in range(model.map.n_classes)]
        if not feature_names:
            raise InvalidArgumentError("Model file carries no feature names; retrain with this version")
        X = load_features(path, feature_names)
        if model.metadata.get("standardization") is not None:
            X = Standardization.from_dict(model.metadata["standardization"]).apply(X)
        predictions = self.predict_labels(model, X, self.config.seed if seed is None else seed)
        proba = model.predict_proba(X)
        frame = pd.DataFrame({"row": np.arange(len(X)), "prediction": [label_names[k] for k in predictions]})
        for k, name in enumerate(label_names):
            frame[f"probability_{name}"] = proba[:, k]
        return frame

    def decision_grid(self, model: MrcModel, ds: Dataset) -> pd.DataFrame:
        """
        Predictions over a regular grid covering the (standardized) feature box of ds

        Only defined for 2-feature data; the box is padded by 10% on each side.
        """
        if ds.n_features != 2:
            raise InvalidArgumentError(f"Decision grids need 2 features, got {ds.n_features}")
        resolution = self.config.decision_grid_resolution
        low, high = ds.features.min(axis=0), ds.features.max(axis=0)
        pad = 0.1 * np.maximum(high - low, 1e-12)
        axis1 = np.linspace(low[0] - pad[0], high[0] + pad[0], resolution)
        axis2 = np.linspace(low[1] - pad[1], high[1] + pad[1], resolution)
        grid1, grid2 = np.meshgrid(axis1, axis2)
        X = np.column_stack([grid1.ravel(), grid2.ravel()])
        label_names = list(ds.label_names)
        frame = pd.DataFrame({
            "x1": X[:, 0],
            "x2": X[:, 1],
            "prediction": [label_names[k] for k in model.predict(X)],
            "max_probability": model.predict_proba(X).max(axis=1),
        })
        return self.schema.conform("decision_grid", frame)

    # ------------------------------------------------------------------
    # Bounds
    # ------------------------------------------------------------------

    def audit_subset(self, train_ds: Dataset, seed: int) -> Dataset:
        rows = select_audit_indices(train_ds, self.config.bounds.audit_fraction, seed)
        logger.info(f"Audit subset: {len(rows)} of {train_ds.n_samples} training rows")
        return train_ds.subset(rows)

    def _bound_options(self, reference: Optional[Dataset]) -> Dict[str, Any]:
        cfg = self.config.bounds
        return {
            "tau_source": cfg.tau_source,
            "reference": reference,
            "max_features": cfg.max_features,
            "min_group_size": cfg.min_group_size,
            "include_groups": cfg.group_bounds,
            "max_workers": self.config.max_workers,
        }

    def _write_lps(self, report: GuaranteeReport):
        for bound in report.bounds():
            for side in (LOWER, UPPER):
                if bound.group is None:
                    lp = overall_bound_lp(report.audit, report.uncertainty, side)
                else:
                    lp = group_bound_lp(report.audit, report.uncertainty, bound.group, side)
                write_lp_file(lp, self.store.output_dir / "lp" / f"bound_{_file_stem(bound.group_name)}_{side}.lp")

    def bounds(self, model: MrcModel, audit_ds: Dataset, reference: Optional[Dataset] = None,
               persist: bool = True) -> Dict[str, Any]:
        """
        Bound sweeps, bounds at the model's lambda0 and extremal reweightings

        Args:
            model: Frozen rule to audit
            audit_ds: Audit instances (standardized like the model's training data)
            reference: Training data, needed for tau_source "train" and sigma retraining
            persist: Write bounds.csv, bounds.json and extremal.csv

        Returns:
            Report section with the bounds at the model's lambda0, the sweep table and extremal summaries
        """
        cfg = self.config.bounds
        options = self._bound_options(reference)

        frames = [bound_sweep(model, audit_ds, "lambda0", cfg.lambda0_grid, **options)]
        if cfg.sigma_grid:
            retrain = None
            if cfg.retrain_sigma:
                if reference is None:
                    raise InvalidArgumentError("Retraining per sigma needs the training data", stage="bounds")
                blind = reference.without_sensitive()
                solver = self.config.solver_config()

                def retrain(spectral):
                    refit = train(blind, spectral, model.lambda0, solver)
                    refit.prediction_rule = model.prediction_rule
                    return refit

            frames.append(bound_sweep(model, audit_ds, "sigma", cfg.sigma_grid, retrain=retrain, **options))
        table = self.schema.conform("bounds", pd.concat(frames, ignore_index=True))

        report = compute_bounds(model, audit_ds, **options)
        label_names = model.metadata.get("label_names", ())
        extremal_frames, extremal_summaries = [], []
        if cfg.extremal:
            for bound in report.bounds():
                for side in (UPPER, LOWER):
                    extremal = extremal_report(bound, report.audit, side, label_names=label_names)
                    frame = extremal.instances.copy()
                    frame["bound"], frame["side"] = bound.group_name, side
                    extremal_frames.append(frame)
                    extremal_summaries.append(extremal.to_dict())

        if persist:
            self.store.write_csv("bounds.csv", table)
            self.store.write_json("bounds.json", {"at_model_lambda0": report.to_dict(), "sweep": _records(table)})
            if extremal_frames:
                self.store.write_csv("extremal.csv",
                                     self.schema.conform("extremal", pd.concat(extremal_frames, ignore_index=True)))
            if self.config.write_lp:
                self._write_lps(report)

        return {
            "at_model_lambda0": report.to_dict(),
            "sweep": _records(table),
            "extremal": extremal_summaries,
        }

    def bounds_for_model(self, model: MrcModel, data_path: Optional[str] = None) -> Dict[str, Any]:
        """
        Audit a saved model

        With a data file the whole file is the audit set; otherwise the configured
        data is split again and the audit subset of its training part is used.
        """
        if data_path:
            with self._stage("data"):
                audit_ds = self.load_for_model(model, data_path)
            with self._stage("bounds"):
                return self.bounds(model, audit_ds, reference=audit_ds)
        data_seed, split_seed = self.repeat_seeds(0)
        with self._stage("data"):
            ds = self.load_data(data_seed)
            raw_train, _, _ = split(ds, self.config.split_spec(split_seed))
            train_ds = replay_standardization(model, raw_train)
        with self._stage("bounds"):
            return self.bounds(model, self.audit_subset(train_ds, data_seed), reference=train_ds)

    # ------------------------------------------------------------------
    # Sweeps and full runs
    # ------------------------------------------------------------------

    def sweep(self, parameter: str, values: Optional[Sequence[float]] = None,
              seeds: Optional[Sequence[int]] = None, sigma: Optional[float] = None,
              lambda0: Optional[float] = None) -> pd.DataFrame:
        """
        Test metrics of untuned models across a sigma or lambda0 grid

        Args:
            parameter: "sigma" or "lambda0"
            values: Grid; the sigma grid of each training part, or tune.lambda_values, by default
            seeds: Data seeds; seed..seed+repeats-1 by default
            sigma: Fixed sigma for lambda0 sweeps, sigma_scale of the training part by default
            lambda0: Fixed lambda0 for sigma sweeps, tune.lambda0_init by default

        Returns:
            One row per (seed, value)
        """
        if parameter not in ("sigma", "lambda0"):
            raise InvalidArgumentError(f"Sweep parameter must be 'sigma' or 'lambda0', got '{parameter}'")
        if parameter == "sigma" and self.config.map.kind == POLYNOMIAL:
            raise InvalidArgumentError("Sigma sweeps need a fourier map")
        tune_cfg = self.config.tune_config()
        solver = self.config.solver_config()
        if seeds is None:
            seeds = [self.repeat_seeds(r)[0] for r in range(self.config.repeats)]

        rows: List[Dict[str, Any]] = []
        for seed in seeds:
            split_seed = seed + self.config.split_seed - self.config.seed
            with self._stage("data"):
                train_ds, _, test = self.prepare(self.load_data(seed), split_seed)
            blind = train_ds.without_sensitive()
            if values:
                grid = list(values)
            elif parameter == "sigma":
                grid = sigma_grid(blind, tune_cfg.D, tune_cfg.n_sigma)
            else:
                grid = list(tune_cfg.lambda_values)
            for value in grid:
                if parameter == "sigma":
                    sigma_value = float(value)
                    lambda_value = tune_cfg.lambda0_init if lambda0 is None else lambda0
                else:
                    sigma_value = sigma if sigma is not None else sigma_scale(blind, tune_cfg.D)
                    lambda_value = float(value)
                row = {"parameter": parameter, "value": float(value), "seed": int(seed)}
                try:
                    with self._stage("sweep"):
                        spectral = build_map(tune_cfg, blind.n_features, blind.n_classes, sigma_value)
                        model = train(blind, spectral, lambda_value, solver)
                        self._annotate(model)
                        metrics = self.evaluate(model, test, seed)
                except SpectreError as e:
                    logger.error(f"Sweep cell seed={seed}, {parameter}={value:.4g} failed: {e}")
                    rows.append({**row, "failed": True, "error": str(e)})
                    continue
                rows.append({
                    **row,
                    **{k: metrics.get(k) for k in PERCENT_KEYS},
                    "worst_case_risk": model.worst_case_risk,
                    "failed": False,
                    "error": None,
                })
                logger.info(f"Sweep seed={seed} {parameter}={value:.4g}: acc={metrics['accuracy']:.4f}"
                            + (f", worst-group acc={metrics['worst_group_accuracy']:.4f}"
                               if "worst_group_accuracy" in metrics else ""))
        return self.schema.conform("sweep", pd.DataFrame(rows))

    def _aggregate(self, runs: List[Dict[str, Any]]) -> Dict[str, Any]:
        frame = pd.DataFrame(runs)
        keys = [k for k in AGGREGATE_KEYS if k in frame.columns]
        numeric = frame[keys].astype(float)
        return {
            "runs": runs,
            "mean": numeric.mean().to_dict(),
            "std": numeric.std(ddof=1).to_dict(),
        }

    def run(self) -> RunReport:
        """
        Run split, tuning, final training, evaluation and bounds

        The first repeat (the configured seeds) produces every artifact; further
        repeats only contribute test metrics to the mean/std summary.

        Returns:
            RunReport, also written to report.json
        """
        config = self.config
        logger.info(f"Starting run {self.run_id} with {config.repeats} repeat(s)")
        report: Optional[RunReport] = None
        runs: List[Dict[str, Any]] = []

        for repeat in range(config.repeats):
            data_seed, split_seed = self.repeat_seeds(repeat)
            primary = repeat == 0
            logger.info(f"Repeat {repeat + 1}/{config.repeats}: data seed {data_seed}, split seed {split_seed}")

            with self._stage("data"):
                ds = self.load_data(data_seed)
                train_ds, val, test = self.prepare(ds, split_seed)
            with self._stage("tune"):
                result = self.tune_and_train(train_ds, val, persist=primary)
            model = result.final_model
            with self._stage("evaluate"):
                train_metrics = self.evaluate(model, train_ds, data_seed)
                test_metrics = self.evaluate(model, test, data_seed)
            runs.append({
                "seed": data_seed,
                "sigma_star": result.sigma_star,
                "lambda0_star": result.lambda0_star,
                **{k: test_metrics[k] for k in AGGREGATE_KEYS if k in test_metrics},
            })
            if not primary:
                continue

            report = RunReport(
                config=config.to_dict(),
                seed=config.seed,
                versions=library_versions(),
                sigma_star=result.sigma_star,
                lambda0_star=result.lambda0_star,
                grid_records=[r.to_dict() for r in result.grid_records],
                train_metrics=train_metrics,
                test_metrics=test_metrics,
                model=model.to_dict(),
            )
            self.store.write_json("model.json", model.to_dict())
            sensitive_columns = config.data.sensitive_columns or "s"
            self.store.write_text("train.csv",
                                  ds.subset(train_ds.indices).to_csv(config.data.label_column, sensitive_columns))
            self.store.write_csv("grid_records.csv", self._grid_frame(result.grid_records))

            if config.bounds.enabled:
                with self._stage("bounds"):
                    section = self.bounds(model, self.audit_subset(train_ds, data_seed), reference=train_ds)
                report.bounds = {"at_model_lambda0": section["at_model_lambda0"], "sweep": section["sweep"]}
                report.extremal = section["extremal"]
            if train_ds.n_features == 2:
                with self._stage("decision_grid"):
                    self.store.write_csv("decision_grid.csv", self.decision_grid(model, train_ds))

        if config.repeats > 1:
            report.repeats = self._aggregate(runs)
        report.timings = dict(self.timings)

        self.store.write_json("report.json", report.to_dict())
        self.store.write_json("schema.json", self.schema.describe())
        self.store.write_checkpoint(self.run_id, {"stage": "complete"})
        logger.info(f"Run {self.run_id} complete: test accuracy {report.test_metrics['accuracy']:.4f}"
                    + (f", worst-group accuracy {report.test_metrics['worst_group_accuracy']:.4f}"
                       if "worst_group_accuracy" in report.test_metrics else ""))
        return report
