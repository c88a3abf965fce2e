"""
Report Schema Module
Versioned schemas of the run report and the CSV result tables
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import pandas as pd

from utils.errors import SpectreError

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SchemaField:
    """One column of a result table"""
    name: str
    field_type: str
    mode: str = "REQUIRED"
    description: str = ""

    def to_dict(self) -> Dict[str, str]:
        return {"name": self.name, "type": self.field_type, "mode": self.mode,
                "description": self.description}


class ReportSchema:
    """Column definitions of every table a run writes"""

    def _get_grid_records_schema(self) -> List[SchemaField]:
        """Define schema for the tuning grid table"""
        return [
            SchemaField("stage", "STRING", description="sigma or lambda0"),
            SchemaField("index", "INTEGER"),
            SchemaField("sigma", "FLOAT"),
            SchemaField("lambda0", "FLOAT"),
            SchemaField("accuracy", "FLOAT", "NULLABLE", "validation accuracy"),
            SchemaField("worst_class_error", "FLOAT", "NULLABLE"),
            SchemaField("class_errors", "STRING", "NULLABLE", "per-class validation errors, ';'-joined"),
            SchemaField("worst_case_risk", "FLOAT", "NULLABLE"),
            SchemaField("iterations", "INTEGER", "NULLABLE"),
            SchemaField("failed", "BOOLEAN"),
            SchemaField("error", "STRING", "NULLABLE"),
        ]

    def _get_bounds_schema(self) -> List[SchemaField]:
        """Define schema for the bound tables (single run and sweeps)"""
        return [
            SchemaField("parameter", "STRING", description="swept parameter, lambda0 or sigma"),
            SchemaField("value", "FLOAT"),
            SchemaField("group", "STRING", "NULLABLE", "group name, or 'overall'"),
            SchemaField("group_id", "INTEGER", "NULLABLE"),
            SchemaField("lower", "FLOAT", "NULLABLE"),
            SchemaField("upper", "FLOAT", "NULLABLE"),
            SchemaField("empirical_error", "FLOAT", "NULLABLE", "audit error of the frozen rule"),
            SchemaField("n_instances", "INTEGER", "NULLABLE"),
            SchemaField("low_confidence", "BOOLEAN", "NULLABLE"),
            SchemaField("status_lower", "STRING", "NULLABLE"),
            SchemaField("status_upper", "STRING", "NULLABLE"),
            SchemaField("n_frequencies", "INTEGER", "NULLABLE"),
            SchemaField("failed", "BOOLEAN"),
            SchemaField("error", "STRING", "NULLABLE"),
        ]

    def _get_extremal_schema(self) -> List[SchemaField]:
        """Define schema for extremal reweighting records"""
        return [
            SchemaField("bound", "STRING", description="group name the distribution belongs to"),
            SchemaField("side", "STRING", description="upper or lower"),
            SchemaField("instance", "INTEGER", description="row index in the source dataset"),
            SchemaField("group", "STRING", "NULLABLE"),
            SchemaField("label", "STRING", "NULLABLE"),
            SchemaField("loss", "FLOAT"),
            SchemaField("weight", "FLOAT"),
            SchemaField("delta", "FLOAT", description="weight minus the uniform weight 1/N"),
        ]

    def _get_decision_grid_schema(self) -> List[SchemaField]:
        """Define schema for 2-D decision rasters"""
        return [
            SchemaField("x1", "FLOAT"),
            SchemaField("x2", "FLOAT"),
            SchemaField("prediction", "STRING"),
            SchemaField("max_probability", "FLOAT"),
        ]

    def _get_sweep_schema(self) -> List[SchemaField]:
        """Define schema for hyperparameter effect sweeps"""
        return [
            SchemaField("parameter", "STRING"),
            SchemaField("value", "FLOAT"),
            SchemaField("seed", "INTEGER"),
            SchemaField("accuracy", "FLOAT", "NULLABLE"),
            SchemaField("worst_group_accuracy", "FLOAT", "NULLABLE"),
            SchemaField("max_acc_disparity", "FLOAT", "NULLABLE"),
            SchemaField("eop", "FLOAT", "NULLABLE"),
            SchemaField("dp", "FLOAT", "NULLABLE"),
            SchemaField("worst_case_risk", "FLOAT", "NULLABLE"),
            SchemaField("failed", "BOOLEAN"),
            SchemaField("error", "STRING", "NULLABLE"),
        ]

    def tables(self) -> Dict[str, List[SchemaField]]:
        return {
            "grid_records": self._get_grid_records_schema(),
            "bounds": self._get_bounds_schema(),
            "extremal": self._get_extremal_schema(),
            "decision_grid": self._get_decision_grid_schema(),
            "sweep": self._get_sweep_schema(),
        }

    def conform(self, table: str, frame: pd.DataFrame) -> pd.DataFrame:
        """
        Order columns by the table schema and check required columns

        Missing nullable columns are added empty; unknown columns are dropped.
        """
        fields = self.tables()[table]
        frame = frame.copy()
        for schema_field in fields:
            if schema_field.name not in frame.columns:
                if schema_field.mode == "REQUIRED":
                    raise SpectreError(f"Table '{table}' is missing required column '{schema_field.name}'",
                                       stage="report")
                frame[schema_field.name] = None
        extra = [c for c in frame.columns if c not in {f.name for f in fields}]
        if extra:
            logger.debug(f"Dropping columns {extra} from table '{table}'")
        return frame[[f.name for f in fields]]

    def describe(self) -> Dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "tables": {name: [f.to_dict() for f in fields] for name, fields in self.tables().items()},
        }


@dataclass
class RunReport:
    """
    Everything one pipeline run produced

    Timings live in their own field so two runs of the same config can be
    compared on everything else.
    """
    config: Dict[str, Any]
    seed: int
    versions: Dict[str, str]
    sigma_star: Optional[float] = None
    lambda0_star: Optional[float] = None
    grid_records: List[Dict[str, Any]] = field(default_factory=list)
    train_metrics: Optional[Dict[str, Any]] = None
    test_metrics: Optional[Dict[str, Any]] = None
    bounds: Optional[Dict[str, Any]] = None
    extremal: List[Dict[str, Any]] = field(default_factory=list)
    model: Optional[Dict[str, Any]] = None
    repeats: Optional[Dict[str, Any]] = None
    timings: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> Dict[str, Any]:
        data = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config": self.config,
            "seed": self.seed,
            "versions": self.versions,
            "sigma_star": self.sigma_star,
            "lambda0_star": self.lambda0_star,
            "grid_records": self.grid_records,
            "train_metrics": self.train_metrics,
            "test_metrics": self.test_metrics,
            "bounds": self.bounds,
            "extremal": self.extremal,
            "model": self.model,
            "repeats": self.repeats,
        }
        if include_timings:
            data["timings"] = self.timings
        return data
