"""Tensor-product boxes with their explicit Dirichlet eigenpairs and boundary geometry."""

from __future__ import annotations

import json
import logging
import math
import typing as t
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from modules.errors import DomainError
from modules.utils import RatioTable, log_grid

LOGGER = logging.getLogger(__name__)


class BoxDomain(BaseModel):
    model_config = ConfigDict(frozen=True)

    d: int = 3
    sides: tuple[float, ...] = (1.0, 1.0, 1.0)

    @model_validator(mode="after")
    def _check_sides(self: t.Self) -> t.Self:
        if not 1 <= self.d <= 3:
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if len(self.sides) != self.d:
            raise ValueError(f"{self.d}-dimensional box needs {self.d} sides, got {len(self.sides)}")
        if any(not side > 0 for side in self.sides):
            raise ValueError("all sides must be positive")
        return self

    @classmethod
    def unit_cube(cls: type[t.Self], d: int = 3) -> t.Self:
        return cls(d=d, sides=(1.0,) * d)

    @property
    def volume(self: t.Self) -> float:
        return float(np.prod(self.sides))

    @property
    def center(self: t.Self) -> np.ndarray:
        return np.asarray(self.sides, dtype=float) / 2.0

    @property
    def lengths(self: t.Self) -> np.ndarray:
        return np.asarray(self.sides, dtype=float)

    def to_dict(self: t.Self) -> dict[str, t.Any]:
        return {"d": self.d, "sides": list(self.sides)}


def load_domain(path: str | Path) -> BoxDomain:
    with open(path, "r") as handle:
        payload = json.load(handle)
    return BoxDomain(d=payload["d"], sides=tuple(payload["sides"]))


def boundary_distance(domain: BoxDomain, x: t.Sequence[float] | np.ndarray) -> float | np.ndarray:
    """
    δ_D(x) = min_i min(x_i, L_i - x_i) for a point or an (n, d) array of points.

    Raises:
        DomainError: a point lies outside the closed box.
    """
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != domain.d:
        raise DomainError(f"point dimension {pts.shape[-1]} does not match domain dimension {domain.d}")
    dist = np.minimum(pts, domain.lengths - pts).min(axis=-1)
    if np.any(dist < -1e-14):
        raise DomainError(f"point outside the closed box {domain.sides}")
    dist = np.maximum(dist, 0.0)
    return float(dist[0]) if single else dist


class FacePoint(t.NamedTuple):
    face: str
    delta: float
    point: np.ndarray


def face_normal_points(
    domain: BoxDomain, deltas: t.Iterable[float], offsets: t.Sequence[float] = (0.0,)
) -> list[FacePoint]:
    """
    Points at depth delta on the normal lines through (shifted) face centers.

    Faces are labelled "x1-", "x1+", ... . A tangential offset o moves every tangential
    coordinate from L_k/2 to L_k(1/2 + o).
    """
    points = []
    for delta in deltas:
        for axis in range(domain.d):
            for sign in ("-", "+"):
                for offset in offsets:
                    x = domain.lengths * (0.5 + offset)
                    x[axis] = delta if sign == "-" else domain.sides[axis] - delta
                    points.append(FacePoint(face=f"x{axis + 1}{sign}", delta=float(delta), point=x))
    return points


# ---------------------------------------------------------------------------------------------
# Eigenpairs


class EigenPair(t.NamedTuple):
    index: tuple[int, ...]
    eigenvalue: float


@dataclass(frozen=True)
class EigenBasis:
    """Dirichlet eigenbasis φ_n(x) = ∏ √(2/L_i) sin(n_i π x_i / L_i), 1 ≤ n_i ≤ cutoff."""

    domain: BoxDomain
    cutoff: int

    def __post_init__(self: t.Self) -> None:
        if self.cutoff < 1:
            raise DomainError(f"cutoff must be at least 1, got {self.cutoff}")

    @property
    def d(self: t.Self) -> int:
        return self.domain.d

    @property
    def shape(self: t.Self) -> tuple[int, ...]:
        return (self.cutoff,) * self.d

    @property
    def size(self: t.Self) -> int:
        return self.cutoff**self.d

    @cached_property
    def lambda_tensor(self: t.Self) -> np.ndarray:
        n = np.arange(1, self.cutoff + 1, dtype=float)
        lam = np.zeros(self.shape)
        for axis, side in enumerate(self.domain.sides):
            shape = [1] * self.d
            shape[axis] = self.cutoff
            lam = lam + (math.pi * n / side).reshape(shape) ** 2
        return lam

    @cached_property
    def order(self: t.Self) -> np.ndarray:
        """Flat tensor positions sorted by eigenvalue, ties broken lexicographically by index."""
        flat = self.lambda_tensor.ravel()
        indices = np.indices(self.shape).reshape(self.d, -1)
        keys = tuple(indices[axis] for axis in reversed(range(self.d))) + (np.round(flat, 8),)
        return np.lexsort(keys)

    @cached_property
    def sorted_eigenvalues(self: t.Self) -> np.ndarray:
        return self.lambda_tensor.ravel()[self.order]

    def index_of(self: t.Self, position: int) -> tuple[int, ...]:
        """Multi-index (1-based) of the eigenpair at a position of the sorted enumeration."""
        flat = int(self.order[position])
        return tuple(int(i) + 1 for i in np.unravel_index(flat, self.shape))

    def eigenvalue(self: t.Self, index: t.Sequence[int]) -> float:
        return float(math.pi**2 * sum((n / side) ** 2 for n, side in zip(index, self.domain.sides)))

    def axis_functions(self: t.Self, axis: int, x: np.ndarray) -> np.ndarray:
        """(cutoff, len(x)) matrix of the 1D eigenfunctions of one axis at the points x."""
        side = self.domain.sides[axis]
        n = np.arange(1, self.cutoff + 1, dtype=float)[:, None]
        return math.sqrt(2.0 / side) * np.sin(n * math.pi * np.asarray(x, dtype=float)[None, :] / side)

    def eigenfunction(self: t.Self, index: t.Sequence[int], x: t.Sequence[float] | np.ndarray) -> float | np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        value = np.ones(pts.shape[0])
        for axis, (n, side) in enumerate(zip(index, self.domain.sides)):
            value = value * math.sqrt(2.0 / side) * np.sin(n * math.pi * pts[:, axis] / side)
        return float(value[0]) if np.asarray(x).ndim == 1 else value

    def evaluate(self: t.Self, coefficients: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Evaluate Σ c_n φ_n at an (m, d) array of points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        factors = [self.axis_functions(axis, pts[:, axis]) for axis in range(self.d)]
        if self.d == 1:
            return np.einsum("a,ap->p", coefficients, factors[0])
        if self.d == 2:
            return np.einsum("ab,ap,bp->p", coefficients, *factors)
        return np.einsum("abc,ap,bp,cp->p", coefficients, *factors, optimize=True)

    def tensor_from_sorted(self: t.Self, values: np.ndarray) -> np.ndarray:
        tensor = np.empty(self.size)
        tensor[self.order] = values
        return tensor.reshape(self.shape)

    def sorted_from_tensor(self: t.Self, tensor: np.ndarray) -> np.ndarray:
        return np.asarray(tensor).ravel()[self.order]

    def descriptor(self: t.Self) -> dict[str, t.Any]:
        return {"domain": self.domain.to_dict(), "cutoff": self.cutoff}


def eigen_enumerate(domain: BoxDomain, cutoff: int) -> list[EigenPair]:
    """All cutoff^d eigenpairs sorted by eigenvalue."""
    basis = EigenBasis(domain, cutoff)
    return [EigenPair(basis.index_of(k), float(lam)) for k, lam in enumerate(basis.sorted_eigenvalues)]


def _enumeration_is_complete(domain: BoxDomain, cutoff: int, eigenvalue: float) -> bool:
    """True when no index with a coordinate above cutoff has an eigenvalue at or below `eigenvalue`."""
    inv_sq = (1.0 / domain.lengths) ** 2
    for axis in range(domain.d):
        smallest = math.pi**2 * ((cutoff + 1) ** 2 * inv_sq[axis] + inv_sq.sum() - inv_sq[axis])
        if smallest <= eigenvalue:
            return False
    return True


def weyl_check(domain: BoxDomain, j_range: t.Sequence[int]) -> RatioTable:
    """
    Table of λ_j j^{-2/d} for j in j_range, enlarging the cutoff until the first max(j_range)
    eigenvalues of the truncated enumeration are the true ones.
    """
    js = np.asarray(list(j_range), dtype=int)
    if js.min() < 1:
        raise DomainError("Weyl ratios start at j = 1")
    j_max = int(js.max())
    cutoff = max(1, math.ceil(j_max ** (1.0 / domain.d)))
    while True:
        eigenvalues = EigenBasis(domain, cutoff).sorted_eigenvalues
        if eigenvalues.size >= j_max and _enumeration_is_complete(domain, cutoff, float(eigenvalues[j_max - 1])):
            break
        cutoff += 1
    LOGGER.debug("weyl check uses cutoff %d for j <= %d", cutoff, j_max)
    values = eigenvalues[js - 1] * js ** (-2.0 / domain.d)
    return RatioTable(label="lambda_j*j^(-2/d)", points=js.astype(float).tolist(), values=values.tolist())


def first_eigenfunction_table(domain: BoxDomain, deltas: t.Sequence[float] | None = None) -> RatioTable:
    """φ_1(x)/δ_D(x) along face-normal lines (edges excluded)."""
    depth = deltas if deltas is not None else log_grid(1e-3, 0.49 * min(domain.sides), 20)
    basis = EigenBasis(domain, 1)
    samples = face_normal_points(domain, depth, offsets=(0.0, 0.1, -0.1))
    points = np.array([sample.point for sample in samples])
    values = np.asarray(basis.eigenfunction((1,) * domain.d, points)) / np.asarray(boundary_distance(domain, points))
    return RatioTable(label="phi_1/delta", points=[s.delta for s in samples], values=values.tolist())
