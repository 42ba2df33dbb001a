import json
import logging
import math

import numpy as np
import pytest

from modules.utils import (
    RatioTable,
    canonical_json,
    log_grid,
    make_artifact_dir,
    parallel_map,
    read_csv,
    setup_logging,
    sha256_of,
    worker_count,
    write_csv,
    write_json,
)


@pytest.mark.parametrize(
    "requested, env_value, expected",
    [
        (4, None, 4),  # Flag wins
        (None, "3", 3),  # Environment variable
        (None, None, 1),  # Default
        (None, "many", 1),  # Non-integer value ignored
        (None, "0", 1),  # At least one worker
    ],
    ids=["flag", "environment", "default", "non_integer", "zero"],
)
def test_worker_count(requested, env_value, expected, monkeypatch):
    # Arrange
    if env_value is None:
        monkeypatch.delenv("SUBLAB_WORKERS", raising=False)
    else:
        monkeypatch.setenv("SUBLAB_WORKERS", env_value)
    # Act
    result = worker_count(requested)
    # Assert
    assert result == expected


def test_worker_count_warns_on_garbage(monkeypatch, caplog):
    monkeypatch.setenv("SUBLAB_WORKERS", "many")

    worker_count()

    assert caplog.record_tuples == [("modules.utils", logging.WARNING, "Ignoring non-integer SUBLAB_WORKERS=many")]


@pytest.mark.parametrize("workers", [1, 2, 5], ids=["serial", "two", "five"])
def test_parallel_map_keeps_order(workers):
    assert parallel_map(lambda x: x * x, list(range(20)), workers) == [x * x for x in range(20)]


def test_log_grid():
    grid = log_grid(1e-3, 1e3, 7)

    assert grid[0] == pytest.approx(1e-3)
    assert grid[-1] == pytest.approx(1e3)
    assert np.allclose(grid[1:] / grid[:-1], 10.0)
    with pytest.raises(ValueError):
        log_grid(0.0, 1.0, 3)


@pytest.mark.parametrize(
    "values, spread, bounded",
    [
        ([1.0, 2.0, 4.0], 4.0, True),  # Within the limit
        ([0.5, 6.0], 12.0, False),  # Spread too large
        ([0.0, 1.0], math.inf, False),  # Non-positive minimum
        ([1.0, math.nan], None, False),  # Not finite
    ],
    ids=["bounded", "too_wide", "zero_min", "nan"],
)
def test_ratio_table(values, spread, bounded):
    # Arrange
    table = RatioTable(label="r", points=list(range(len(values))), values=values)
    # Act / Assert
    if spread is not None:
        assert table.spread == spread
    assert table.bounded(10.0) is bounded
    assert table.rows()[0] == ["r", 0, values[0]]


def test_write_json_is_canonical(tmp_path):
    # Arrange
    payload = {"b": np.float64(0.1), "a": [np.int64(2), float("inf")], "c": {"z": 1, "y": np.array([1.5, 2.5])}}
    # Act
    path = write_json(tmp_path / "nested" / "out.json", payload)
    # Assert
    text = path.read_text()
    assert list(json.loads(text)) == ["a", "b", "c"]
    assert json.loads(text) == {"a": [2, None], "b": 0.1, "c": {"y": [1.5, 2.5], "z": 1}}
    assert text == canonical_json(payload) + "\n"


def test_write_csv_uses_repr_floats(tmp_path):
    path = write_csv(tmp_path / "t.csv", ["j", "value"], [[1, 0.1 + 0.2], [np.int64(2), np.float64(1 / 3)]])

    header, rows = read_csv(path)

    assert header == ["j", "value"]
    assert rows == [["1", "0.30000000000000004"], ["2", repr(1 / 3)]]


def test_sha256_ignores_key_order():
    assert sha256_of({"a": 1, "b": [1.0, 2.0]}) == sha256_of({"b": [1.0, 2.0], "a": 1})
    assert sha256_of({"a": 1}) != sha256_of({"a": 2})


def test_make_artifact_dir(tmp_path):
    result = make_artifact_dir(tmp_path, "ladder", "fields")

    assert result == tmp_path / "ladder" / "fields"
    assert result.is_dir()


def test_setup_logging_writes_file(tmp_path):
    # Arrange
    log_file = tmp_path / "logs" / "sublab.log"
    # Act
    setup_logging(str(log_file), verbose=True)
    logging.getLogger("modules.test").info("solved j=%d", 3)
    setup_logging(None)
    # Assert
    assert log_file.read_text().strip().endswith("INFO - solved j=3")
    sublab_handlers = [h for h in logging.getLogger().handlers if getattr(h, "_sublab", False)]
    assert len(sublab_handlers) == 1
