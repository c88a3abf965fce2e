import json

import numpy as np
import pandas as pd

from utils.storage import ArtifactStore, atomic_write_text, dumps_json


def test_json_is_strict_and_stable(tmp_path):
    store = ArtifactStore(str(tmp_path / "out"))
    path = store.write_json("report.json", {"b": np.float64("nan"), "a": np.arange(3), "c": np.int64(4)})
    text = path.read_text(encoding="utf-8")
    assert json.loads(text) == {"a": [0, 1, 2], "b": None, "c": 4}
    assert text.index('"a"') < text.index('"b"')
    assert store.read_json("report.json")["c"] == 4


def test_full_float_precision_survives():
    value = 0.1 + 0.2
    assert json.loads(dumps_json({"x": value}))["x"] == value


def test_missing_artifact_reads_as_none(tmp_path):
    assert ArtifactStore(str(tmp_path)).read_json("model.json") is None


def test_csv_tables(tmp_path):
    store = ArtifactStore(str(tmp_path))
    frame = pd.DataFrame({"group": ["0", "1"], "upper": [0.25, 0.5]})
    path = store.write_csv("bounds.csv", frame)
    assert path.read_text(encoding="utf-8").splitlines() == ["group,upper", "0,0.25", "1,0.5"]


def test_checkpoints_round_trip(tmp_path):
    store = ArtifactStore(str(tmp_path))
    assert store.read_checkpoint("abc") is None
    store.write_checkpoint("abc", {"records": [1, 2]})
    checkpoint = store.read_checkpoint("abc")
    assert checkpoint["run_id"] == "abc"
    assert checkpoint["data"] == {"records": [1, 2]}


def test_listing_skips_hidden_files_and_directories(tmp_path):
    store = ArtifactStore(str(tmp_path))
    store.write_text("model.json", "{}")
    store.write_text(".hidden", "x")
    store.write_checkpoint("abc", {})
    assert store.list_artifacts() == ["model.json"]
    summary = store.summary()
    assert summary["artifacts"] == {"model.json": 2}
    assert summary["total_size_bytes"] == 2


def test_atomic_write_replaces_and_leaves_no_temp_files(tmp_path):
    target = tmp_path / "nested" / "file.txt"
    atomic_write_text(target, "first")
    atomic_write_text(target, "second")
    assert target.read_text(encoding="utf-8") == "second"
    assert [p.name for p in target.parent.iterdir()] == ["file.txt"]
