from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import math
import os
import typing as t
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
WORKERS_ENV = "SUBLAB_WORKERS"


def setup_logging(log_file_path: str | None, verbose: bool = False) -> None:
    """
    Configure the root logger with a file handler and a stderr handler.

    Args:
        log_file_path (str | None): Where the log file is written, None disables the file handler.
        verbose (bool): Emit debug records on stderr.
    """
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    for handler in list(root.handlers):
        if getattr(handler, "_sublab", False):
            root.removeHandler(handler)
    formatter = logging.Formatter(LOG_FORMAT)
    stream = logging.StreamHandler()
    stream.setLevel(logging.DEBUG if verbose else logging.INFO)
    stream.setFormatter(formatter)
    stream._sublab = True  # type: ignore[attr-defined]
    root.addHandler(stream)
    if log_file_path:
        Path(log_file_path).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file_path)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        file_handler._sublab = True  # type: ignore[attr-defined]
        root.addHandler(file_handler)


def worker_count(requested: int | None = None) -> int:
    """
    Resolve the worker count from the command line or the SUBLAB_WORKERS environment variable.

    Args:
        requested (int | None): Value given on the command line.

    Returns:
        int: A worker count of at least one.
    """
    if requested:
        return max(1, int(requested))
    env_value = os.environ.get(WORKERS_ENV, "").strip()
    if not env_value:
        return 1
    try:
        return max(1, int(env_value))
    except ValueError:
        LOGGER.warning("Ignoring non-integer %s=%s", WORKERS_ENV, env_value)
        return 1


def parallel_map(fn: t.Callable[[t.Any], t.Any], items: t.Sequence[t.Any], workers: int = 1) -> list[t.Any]:
    """Map fn over items, returning results in input order whatever the worker count."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    if lo <= 0 or hi <= lo:
        raise ValueError(f"log grid needs 0 < lo < hi, got ({lo}, {hi})")
    return np.logspace(math.log10(lo), math.log10(hi), n)


class RatioTable(BaseModel):
    """Sampled values of a ratio that a comparability statement claims is bounded."""

    model_config = ConfigDict(frozen=True)

    label: str
    points: list[float]
    values: list[float]

    @property
    def vmin(self: t.Self) -> float:
        return min(self.values)

    @property
    def vmax(self: t.Self) -> float:
        return max(self.values)

    @property
    def spread(self: t.Self) -> float:
        """max/min of the sampled values, infinite when the minimum is not positive."""
        low = self.vmin
        return self.vmax / low if low > 0 else math.inf

    def bounded(self: t.Self, limit: float) -> bool:
        return all(math.isfinite(v) for v in self.values) and self.spread < limit

    def rows(self: t.Self) -> list[list[t.Any]]:
        return [[self.label, p, v] for p, v in zip(self.points, self.values)]


def _jsonable(value: t.Any) -> t.Any:
    if isinstance(value, BaseModel):
        return _jsonable(value.model_dump(mode="python"))
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, enum.Enum):
        return value.value
    return value


def canonical_json(payload: t.Any) -> str:
    return json.dumps(_jsonable(payload), sort_keys=True, indent=2, allow_nan=False)


def write_json(path: str | Path, payload: t.Any) -> Path:
    """
    Write payload as JSON with sorted keys and repr-exact floats.

    Args:
        path (str | Path): Target file, parent directories are created.
        payload: Mapping, list or pydantic model.

    Returns:
        Path: The written path.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(canonical_json(payload) + "\n")
    LOGGER.debug("wrote %s", target)
    return target


def write_csv(path: str | Path, columns: t.Sequence[str], rows: t.Iterable[t.Sequence[t.Any]]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row])
    LOGGER.debug("wrote %s", target)
    return target


def _csv_cell(value: t.Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        return header, [row for row in reader]


def sha256_of(payload: t.Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def make_artifact_dir(base_dir: str | Path, *parts: str) -> Path:
    """
    Create (if needed) and return an artifact directory below base_dir.

    Args:
        base_dir (str | Path): The output root of a run.
        *parts (str): Optional nested directory names.

    Returns:
        Path: The created directory.
    """
    target = Path(base_dir).joinpath(*parts)
    target.mkdir(parents=True, exist_ok=True)
    return target
