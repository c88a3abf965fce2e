import pandas as pd
import pytest

from modules.schema import REPORT_SCHEMA_VERSION, ReportSchema, RunReport
from utils.errors import SpectreError


def test_conform_orders_fills_and_drops():
    frame = pd.DataFrame({
        "extra": [1],
        "value": [0.5],
        "parameter": ["lambda0"],
        "failed": [False],
    })
    conformed = ReportSchema().conform("bounds", frame)
    names = [f.name for f in ReportSchema().tables()["bounds"]]
    assert list(conformed.columns) == names
    assert "extra" not in conformed.columns
    assert conformed["upper"].isna().all()


def test_conform_requires_required_columns():
    with pytest.raises(SpectreError, match="failed"):
        ReportSchema().conform("bounds", pd.DataFrame({"parameter": ["sigma"], "value": [1.0]}))


def test_describe_lists_every_table():
    description = ReportSchema().describe()
    assert description["schema_version"] == REPORT_SCHEMA_VERSION == 1
    assert set(description["tables"]) == {"grid_records", "bounds", "extremal", "decision_grid", "sweep"}
    first = description["tables"]["extremal"][0]
    assert first == {"name": "bound", "type": "STRING", "mode": "REQUIRED",
                     "description": "group name the distribution belongs to"}


def test_report_timings_are_optional():
    report = RunReport(config={}, seed=0, versions={"numpy": "x"}, timings={"tune": 1.5})
    assert report.to_dict()["timings"] == {"tune": 1.5}
    without = report.to_dict(include_timings=False)
    assert "timings" not in without
    assert without["schema_version"] == 1
