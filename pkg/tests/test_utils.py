import json
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from app.core.exceptions import PathFailureError
from app.monitor.run_monitor import RunMonitor
from app.utils.circuit_breaker import CircuitState, PathFailureBreaker
from app.utils.file_storage import ArtifactStorage


def test_breaker_waits_for_minimum_paths():
    breaker = PathFailureBreaker(max_failure_fraction=0.01, min_paths=100)
    breaker.record(np.array([True] + [False] * 9))
    assert breaker.state is CircuitState.CLOSED
    assert breaker.failure_fraction == pytest.approx(0.1)


def test_breaker_opens_above_fraction():
    breaker = PathFailureBreaker(max_failure_fraction=0.01, min_paths=100)
    breaker.record(np.zeros(98, dtype=bool))
    with pytest.raises(PathFailureError) as info:
        breaker.record(np.array([True, True]))
    assert breaker.state is CircuitState.OPEN
    assert info.value.detail["failures"] == 2
    breaker.reset()
    assert breaker.total == 0 and breaker.state is CircuitState.CLOSED


def test_breaker_as_decorator():
    breaker = PathFailureBreaker(max_failure_fraction=0.0, min_paths=1)

    @breaker
    def simulate(n_failed):
        return SimpleNamespace(aborted=[True] * n_failed + [False])

    assert simulate(0).aborted == [False]
    with pytest.raises(PathFailureError):
        simulate(1)
    with pytest.raises(PathFailureError):
        simulate(0)


def test_table_uses_full_precision(tmp_path):
    storage = ArtifactStorage(tmp_path)
    storage.write_table(pd.DataFrame({"x": [0.1, 1 / 3]}), "table.csv", subfolder="levels")
    text = (tmp_path / "levels" / "table.csv").read_bytes().decode("utf-8")
    assert text == "x\n0.10000000000000001\n0.33333333333333331\n"
    assert storage.artifacts == ["levels/table.csv"]


def test_json_is_sorted_and_repeatable(tmp_path):
    storage = ArtifactStorage(tmp_path)
    first = storage.write_json({"b": 1, "a": [1.5]}, "x.json").read_bytes()
    second = storage.write_json({"a": [1.5], "b": 1}, "x.json").read_bytes()
    assert first == second
    assert storage.read_json("x.json") == {"a": [1.5], "b": 1}
    assert storage.read_json("missing.json") is None
    assert storage.artifacts == ["x.json"]


def test_manifest_lists_artifacts(tmp_path):
    storage = ArtifactStorage(tmp_path)
    storage.write_json({}, "report.json")
    storage.write_table(pd.DataFrame({"t": [0.0]}), "limit_path.csv")
    manifest = storage.write_manifest("abc123", seed=7, experiment="first-order", exit_code=1)
    on_disk = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    assert on_disk["artifacts"] == ["limit_path.csv", "report.json"]
    assert on_disk["config_hash"] == "abc123"
    assert on_disk["exit_code"] == 1
    assert "numpy" in manifest.versions


def test_monitor_counts():
    monitor = RunMonitor("slow-clt")
    monitor.paths(10, aborted=1)
    monitor.paths(5)
    monitor.warn("窗口过窄")
    monitor.stage("dt=0.01", paths=15, gap=0.5)
    summary = monitor.summary()
    assert summary["paths_done"] == 15.0
    assert summary["paths_aborted"] == 1.0
    assert summary["warnings"] == 1.0
    assert monitor.stages[0]["stage"] == "dt=0.01"
    assert monitor.stages[0]["gap"] == 0.5


def test_frame_written_in_each_format(tmp_path):
    storage = ArtifactStorage(tmp_path)
    frame = pd.DataFrame({"t": [0.0, 0.5], "B": [1.0, 0.75]})
    storage.write_frame(frame, "series", ["csv", "json"], subfolder="paths")
    assert storage.artifacts == ["paths/series.csv", "paths/series.json"]
    assert storage.read_json("series.json", subfolder="paths") == {"B": [1.0, 0.75], "t": [0.0, 0.5]}
    with pytest.raises(ValueError):
        storage.write_frame(frame, "series", ["parquet"])
