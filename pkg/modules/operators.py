"""
The operator φ(−Δ|_D) on boxes.

Two backends live here. The spectral backend works on eigen-coefficients (expand, apply,
Green, semigroup). The kernel backend integrates image-series heat kernels against 𝔲 or μ in
time and gives Pσ, κ, J_D, Green-of-one and the pointwise principal-value operator.
"""

from __future__ import annotations

import functools
import json
import logging
import math
import typing as t
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from numpy.polynomial import legendre
from pydantic import BaseModel, ConfigDict
from scipy import integrate, special

from modules.bernstein import (
    BernsteinSpec,
    Family,
    jump_kernel,
    jump_kernel_moment,
    levy_density,
    levy_tail,
    phi_eval,
    potential_density,
    potential_measure,
)
from modules.domain import BoxDomain, EigenBasis, boundary_distance, face_normal_points
from modules.errors import DomainError, GridMismatchError, NumericalError
from modules.utils import RatioTable, log_grid, read_csv, write_csv, write_json

LOGGER = logging.getLogger(__name__)

SERIES_THRESHOLD = 1e-16
IMAGE_MAX_TERMS = 400
EIGEN_MAX_TERMS = 4000
TIME_RTOL = 1e-6
# S(t, x) <= exp(-SURVIVAL_DECAY) beyond t = SURVIVAL_DECAY / λ_1
SURVIVAL_DECAY = 60.0


# ---------------------------------------------------------------------------------------------
# Quadrature grid


@dataclass(frozen=True)
class Grid:
    """
    Tensor grid of Gauss–Legendre rules on both halves of every axis.

    On [0, L/2] the nodes are x = (L/2) s^γ for the Gauss–Legendre nodes s of (0, 1); the
    other half is the mirror image. Nodes are strictly interior and weights positive.
    """

    domain: BoxDomain
    nodes_per_half: int = 32
    grading: float = 3.0

    def __post_init__(self: t.Self) -> None:
        if self.nodes_per_half < 1:
            raise DomainError(f"nodes_per_half must be at least 1, got {self.nodes_per_half}")
        if self.grading < 1:
            raise DomainError(f"grading exponent must be >= 1, got {self.grading}")

    @cached_property
    def axes(self: t.Self) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        z, w = legendre.leggauss(self.nodes_per_half)
        s = (z + 1.0) / 2.0
        ws = w / 2.0
        rules = []
        for side in self.domain.sides:
            half = side / 2.0
            x = half * s**self.grading
            wx = half * self.grading * s ** (self.grading - 1.0) * ws
            rules.append((np.concatenate([x, side - x[::-1]]), np.concatenate([wx, wx[::-1]])))
        return tuple(rules)

    @property
    def shape(self: t.Self) -> tuple[int, ...]:
        return (2 * self.nodes_per_half,) * self.domain.d

    @property
    def min_distance(self: t.Self) -> float:
        return min(float(nodes[0]) for nodes, _ in self.axes)

    def points(self: t.Self) -> np.ndarray:
        """All grid points as an (n^d, d) array in C order of the grid tensor."""
        mesh = np.meshgrid(*(nodes for nodes, _ in self.axes), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def distance_tensor(self: t.Self) -> np.ndarray:
        return np.asarray(boundary_distance(self.domain, self.points())).reshape(self.shape)

    def integrate(self: t.Self, values: np.ndarray) -> float:
        return float(_mode_product(np.asarray(values), [w[None, :] for _, w in self.axes]).ravel()[0])

    def descriptor(self: t.Self) -> dict[str, t.Any]:
        return {"domain": self.domain.to_dict(), "nodes_per_half": self.nodes_per_half, "grading": self.grading}


def _mode_product(tensor: np.ndarray, matrices: t.Sequence[np.ndarray]) -> np.ndarray:
    """Contract matrices[k] (rows x tensor.shape[k]) against axis k of the tensor."""
    out = tensor
    for axis, matrix in enumerate(matrices):
        out = np.moveaxis(np.tensordot(matrix, out, axes=([1], [axis])), 0, axis)
    return out


# ---------------------------------------------------------------------------------------------
# Spectral fields


@dataclass
class SpectralField:
    """Eigen-coefficients û_n of a function on the truncated basis, with optional grid samples."""

    basis: EigenBasis
    coefficients: np.ndarray
    grid: Grid | None = None
    grid_values: np.ndarray | None = None

    def __post_init__(self: t.Self) -> None:
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != self.basis.shape:
            raise GridMismatchError(
                f"coefficient tensor of shape {self.coefficients.shape} does not fit basis shape {self.basis.shape}"
            )

    @classmethod
    def zeros(cls: type[t.Self], basis: EigenBasis) -> t.Self:
        return cls(basis, np.zeros(basis.shape))

    @classmethod
    def eigenfunction(cls: type[t.Self], basis: EigenBasis, index: t.Sequence[int], value: float = 1.0) -> t.Self:
        coefficients = np.zeros(basis.shape)
        coefficients[tuple(n - 1 for n in index)] = value
        return cls(basis, coefficients)

    def coefficient(self: t.Self, index: t.Sequence[int]) -> float:
        return float(self.coefficients[tuple(n - 1 for n in index)])

    def sorted_coefficients(self: t.Self) -> np.ndarray:
        return self.basis.sorted_from_tensor(self.coefficients)

    def with_coefficients(self: t.Self, coefficients: np.ndarray) -> "SpectralField":
        return SpectralField(self.basis, coefficients)

    def evaluate(self: t.Self, points: np.ndarray) -> np.ndarray:
        return self.basis.evaluate(self.coefficients, points)

    def __call__(self: t.Self, points: np.ndarray) -> np.ndarray:
        return self.evaluate(points)

    def on_grid(self: t.Self, grid: Grid) -> np.ndarray:
        if grid.domain != self.basis.domain:
            raise GridMismatchError("grid and basis live on different domains")
        if self.grid == grid and self.grid_values is not None:
            return self.grid_values
        factors = [self.basis.axis_functions(axis, nodes).T for axis, (nodes, _) in enumerate(grid.axes)]
        return _mode_product(self.coefficients, factors)

    def parseval_gap(self: t.Self) -> float:
        """|Σ w u² − Σ û²| / (1 + Σ û²) for the cached grid samples, zero when none are cached."""
        if self.grid is None or self.grid_values is None:
            return 0.0
        energy = float(np.sum(self.coefficients**2))
        return abs(self.grid.integrate(self.grid_values**2) - energy) / (1.0 + energy)


def expand(grid_values: np.ndarray, grid: Grid, basis: EigenBasis) -> SpectralField:
    """
    Coefficients ⟨u, φ_n⟩ by the tensorized grid quadrature.

    Raises:
        GridMismatchError: samples do not have the grid shape or grid and basis domains differ.
    """
    values = np.asarray(grid_values, dtype=float)
    if values.shape != grid.shape:
        raise GridMismatchError(f"samples of shape {values.shape} do not match grid shape {grid.shape}")
    if grid.domain != basis.domain:
        raise GridMismatchError("grid and basis live on different domains")
    factors = [basis.axis_functions(axis, nodes) * weights[None, :] for axis, (nodes, weights) in enumerate(grid.axes)]
    return SpectralField(basis, _mode_product(values, factors), grid=grid, grid_values=values)


@functools.lru_cache(maxsize=64)
def _multipliers(spec: BernsteinSpec, basis: EigenBasis) -> np.ndarray:
    values = np.asarray(phi_eval(spec, basis.lambda_tensor), dtype=float)
    values.setflags(write=False)
    return values


def apply_phi_op(field: SpectralField, spec: BernsteinSpec) -> SpectralField:
    return field.with_coefficients(field.coefficients * _multipliers(spec, field.basis))


def green_apply(field: SpectralField, spec: BernsteinSpec) -> SpectralField:
    return field.with_coefficients(field.coefficients / _multipliers(spec, field.basis))


def classical_green(field: SpectralField) -> SpectralField:
    """Green operator of −Δ|_D, coefficients divided by λ_n."""
    return field.with_coefficients(field.coefficients / field.basis.lambda_tensor)


def semigroup_apply(field: SpectralField, t_val: float) -> SpectralField:
    if t_val < 0:
        raise DomainError(f"semigroup time must be non-negative, got {t_val}")
    return field.with_coefficients(field.coefficients * np.exp(-field.basis.lambda_tensor * t_val))


def save_field(field: SpectralField, path: str | Path) -> Path:
    """
    Write a JSON header with the basis descriptor next to a CSV payload of the coefficients.

    The CSV has columns n1..nd, coefficient, in eigenvalue order.
    """
    header_path = Path(path)
    payload_path = header_path.with_suffix(".csv")
    basis = field.basis
    coefficients = field.sorted_coefficients()
    rows = [[*basis.index_of(pos), float(coefficients[pos])] for pos in range(basis.size)]
    write_csv(payload_path, [f"n{axis + 1}" for axis in range(basis.d)] + ["coefficient"], rows)
    write_json(
        header_path,
        {"basis": basis.descriptor(), "format": "csv", "payload": payload_path.name, "count": basis.size},
    )
    return header_path


def load_field(path: str | Path) -> SpectralField:
    header_path = Path(path)
    with open(header_path, "r") as handle:
        header = json.load(handle)
    descriptor = header["basis"]
    domain = BoxDomain(d=descriptor["domain"]["d"], sides=tuple(descriptor["domain"]["sides"]))
    basis = EigenBasis(domain, int(descriptor["cutoff"]))
    columns, rows = read_csv(header_path.parent / header["payload"])
    if len(rows) != basis.size or len(columns) != basis.d + 1:
        raise GridMismatchError(f"payload of {header_path} does not match its basis descriptor")
    coefficients = np.zeros(basis.shape)
    for row in rows:
        index = tuple(int(v) - 1 for v in row[: basis.d])
        coefficients[index] = float(row[basis.d])
    return SpectralField(basis, coefficients)


# ---------------------------------------------------------------------------------------------
# One-dimensional Dirichlet heat kernels on [0, L], generator d²/dx²


def _gauss(z: np.ndarray, t_val: np.ndarray) -> np.ndarray:
    return np.exp(-z * z / (4.0 * t_val)) / np.sqrt(4.0 * math.pi * t_val)


def _as_float(*arrays: t.Any) -> list[np.ndarray]:
    return [np.asarray(a, dtype=float) for a in np.broadcast_arrays(*arrays)]


def _series_exhausted(what: str, t_val: np.ndarray) -> t.NoReturn:
    raise NumericalError(f"{what} series did not reach the truncation threshold", {"t_min": float(np.min(t_val))})


def interval_kernel_images(t_val: t.Any, x: t.Any, y: t.Any, side: float, skip_direct: bool = False) -> np.ndarray:
    """
    Σ_k [g_t(x − y + 2kL) − g_t(x + y + 2kL)], adding k = ±1, ±2, ... until the new terms drop
    below SERIES_THRESHOLD. skip_direct leaves out g_t(x − y), giving p_D − g_t.
    """
    ts, xs, ys = _as_float(t_val, x, y)
    total = -_gauss(xs + ys, ts)
    if not skip_direct:
        total = total + _gauss(xs - ys, ts)
    for k in range(1, IMAGE_MAX_TERMS + 1):
        shift = 2.0 * k * side
        a, b = _gauss(xs - ys + shift, ts), _gauss(xs - ys - shift, ts)
        c, e = _gauss(xs + ys + shift, ts), _gauss(xs + ys - shift, ts)
        total = total + a + b - c - e
        if max(np.max(a, initial=0.0), np.max(b, initial=0.0), np.max(c, initial=0.0), np.max(e, initial=0.0)) < (
            SERIES_THRESHOLD
        ):
            return total
    _series_exhausted("image", ts)


def interval_kernel_eigen(t_val: t.Any, x: t.Any, y: t.Any, side: float) -> np.ndarray:
    """Σ_n (2/L) sin(nπx/L) sin(nπy/L) e^{−(nπ/L)² t}."""
    ts, xs, ys = _as_float(t_val, x, y)
    total = np.zeros(ts.shape)
    for n in range(1, EIGEN_MAX_TERMS + 1):
        k = n * math.pi / side
        decay = np.exp(-k * k * ts)
        total = total + (2.0 / side) * np.sin(k * xs) * np.sin(k * ys) * decay
        if (2.0 / side) * np.max(decay, initial=0.0) < SERIES_THRESHOLD:
            return total
    _series_exhausted("eigen", ts)


def _split_by_time(
    images: t.Callable[..., np.ndarray], eigen: t.Callable[..., np.ndarray], side: float, *arrays: t.Any
) -> np.ndarray:
    """Image series for t <= L²/4, eigen-series above, both truncated at SERIES_THRESHOLD."""
    ts, *rest = _as_float(*arrays)
    out = np.empty(ts.shape)
    small = ts <= side * side / 4.0
    if np.any(small):
        out[small] = images(ts[small], *(a[small] for a in rest), side)
    if not np.all(small):
        large = ~small
        out[large] = eigen(ts[large], *(a[large] for a in rest), side)
    return out


def interval_kernel(t_val: t.Any, x: t.Any, y: t.Any, side: float) -> np.ndarray:
    return _split_by_time(interval_kernel_images, interval_kernel_eigen, side, t_val, x, y)


def _kernel_remainder_eigen(t_val: np.ndarray, x: np.ndarray, y: np.ndarray, side: float) -> np.ndarray:
    return interval_kernel_eigen(t_val, x, y, side) - _gauss(x - y, t_val)


def interval_kernel_remainder(t_val: t.Any, x: t.Any, y: t.Any, side: float) -> np.ndarray:
    """p_D − g_t on the interval, without cancellation at small t."""
    return _split_by_time(
        functools.partial(interval_kernel_images, skip_direct=True), _kernel_remainder_eigen, side, t_val, x, y
    )


def _exit_images(t_val: np.ndarray, x: np.ndarray, side: float) -> np.ndarray:
    # 1 - S = 2 Σ_n (-1)^n [Q(nL + x) + Q((n+1)L - x)], Q(z) = P(N(0, 2t) > z)
    sigma = np.sqrt(2.0 * t_val)
    total = np.zeros(t_val.shape)
    for n in range(IMAGE_MAX_TERMS):
        term = special.ndtr(-(n * side + x) / sigma) + special.ndtr(-((n + 1) * side - x) / sigma)
        total = total + (2.0 if n % 2 == 0 else -2.0) * term
        if np.max(term, initial=0.0) < SERIES_THRESHOLD:
            return total
    _series_exhausted("exit-probability image", t_val)


def _survival_eigen(t_val: np.ndarray, x: np.ndarray, side: float) -> np.ndarray:
    total = np.zeros(t_val.shape)
    for n in range(1, 2 * EIGEN_MAX_TERMS, 2):
        k = n * math.pi / side
        decay = np.exp(-k * k * t_val)
        total = total + 4.0 / (n * math.pi) * np.sin(k * x) * decay
        if 4.0 / (n * math.pi) * np.max(decay, initial=0.0) < SERIES_THRESHOLD:
            return total
    _series_exhausted("survival eigen", t_val)


def interval_survival(t_val: t.Any, x: t.Any, side: float) -> np.ndarray:
    """P_x(τ_(0,L) > t)."""
    return _split_by_time(lambda ts, xs, s: 1.0 - _exit_images(ts, xs, s), _survival_eigen, side, t_val, x)


def interval_exit_probability(t_val: t.Any, x: t.Any, side: float) -> np.ndarray:
    """P_x(τ_(0,L) <= t), accurate when it is tiny."""
    return _split_by_time(_exit_images, lambda ts, xs, s: 1.0 - _survival_eigen(ts, xs, s), side, t_val, x)


def _flux_images(t_val: np.ndarray, x: np.ndarray, side: float) -> np.ndarray:
    norm = 1.0 / np.sqrt(4.0 * math.pi * t_val**3)

    def hit(z: np.ndarray) -> np.ndarray:
        return z * np.exp(-z * z / (4.0 * t_val)) * norm

    total = hit(x) + hit(side - x)
    for k in range(1, IMAGE_MAX_TERMS + 1):
        shift = 2.0 * k * side
        terms = [hit(x + shift), hit(x - shift), hit(side - x + shift), hit(side - x - shift)]
        total = total + sum(terms)
        if max(np.max(np.abs(term), initial=0.0) for term in terms) < SERIES_THRESHOLD:
            return total
    _series_exhausted("flux image", t_val)


def _flux_eigen(t_val: np.ndarray, x: np.ndarray, side: float) -> np.ndarray:
    total = np.zeros(t_val.shape)
    for n in range(1, 2 * EIGEN_MAX_TERMS, 2):
        k = n * math.pi / side
        decay = np.exp(-k * k * t_val)
        scale = 4.0 * n * math.pi / side**2
        total = total + scale * np.sin(k * x) * decay
        if scale * np.max(decay, initial=0.0) < SERIES_THRESHOLD:
            return total
    _series_exhausted("flux eigen", t_val)


def interval_exit_density(t_val: t.Any, x: t.Any, side: float) -> np.ndarray:
    """−∂_t S: the density of the exit time through either endpoint."""
    return _split_by_time(_flux_images, _flux_eigen, side, t_val, x)


def _mass_images(t_val: np.ndarray, x: np.ndarray, a: np.ndarray, b: np.ndarray, side: float) -> np.ndarray:
    sigma = np.sqrt(2.0 * t_val)

    def block(shift: float) -> np.ndarray:
        return (
            special.ndtr((b - x + shift) / sigma)
            - special.ndtr((a - x + shift) / sigma)
            - special.ndtr((b + x + shift) / sigma)
            + special.ndtr((a + x + shift) / sigma)
        )

    total = block(0.0)
    for k in range(1, IMAGE_MAX_TERMS + 1):
        plus, minus = block(2.0 * k * side), block(-2.0 * k * side)
        total = total + plus + minus
        if max(np.max(np.abs(plus), initial=0.0), np.max(np.abs(minus), initial=0.0)) < SERIES_THRESHOLD:
            return total
    _series_exhausted("interval mass image", t_val)


def _mass_eigen(t_val: np.ndarray, x: np.ndarray, a: np.ndarray, b: np.ndarray, side: float) -> np.ndarray:
    total = np.zeros(t_val.shape)
    for n in range(1, EIGEN_MAX_TERMS + 1):
        k = n * math.pi / side
        decay = np.exp(-k * k * t_val)
        total = total + 2.0 / (n * math.pi) * np.sin(k * x) * (np.cos(k * a) - np.cos(k * b)) * decay
        if 4.0 / (n * math.pi) * np.max(decay, initial=0.0) < SERIES_THRESHOLD:
            return total
    _series_exhausted("interval mass eigen", t_val)


def interval_mass(t_val: t.Any, x: t.Any, a: float, b: float, side: float) -> np.ndarray:
    """∫_a^b p_D(t, x, y) dy on (0, L)."""
    if b <= a:
        return np.zeros(np.broadcast(np.asarray(t_val), np.asarray(x)).shape)
    return _split_by_time(_mass_images, _mass_eigen, side, t_val, x, a, b)


def _normal_pdf(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _segment_images(
    t_val: np.ndarray, x: np.ndarray, a: np.ndarray, b: np.ndarray, side: float
) -> tuple[np.ndarray, np.ndarray]:
    sigma = np.sqrt(2.0 * t_val)
    width = b - a

    def block(centre: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = (a - centre) / sigma, (b - centre) / sigma
        mass = special.ndtr(hi) - special.ndtr(lo)
        moment = (centre - a) * mass + sigma * (_normal_pdf(lo) - _normal_pdf(hi))
        return mass, moment / width

    mass, ramp = block(x)
    mirror_mass, mirror_ramp = block(-x)
    mass, ramp = mass - mirror_mass, ramp - mirror_ramp
    for k in range(1, IMAGE_MAX_TERMS + 1):
        shift = 2.0 * k * side
        newest = 0.0
        for centre, sign in ((x + shift, 1.0), (x - shift, 1.0), (shift - x, -1.0), (-shift - x, -1.0)):
            term_mass, term_ramp = block(centre)
            mass, ramp = mass + sign * term_mass, ramp + sign * term_ramp
            newest = max(newest, float(np.max(np.abs(term_mass), initial=0.0)))
        if newest < SERIES_THRESHOLD:
            return mass, ramp
    _series_exhausted("segment image", t_val)


def _segment_eigen(
    t_val: np.ndarray, x: np.ndarray, a: np.ndarray, b: np.ndarray, side: float
) -> tuple[np.ndarray, np.ndarray]:
    # differences of sines and cosines are taken in product form, exact for tiny segments
    half, mid = (b - a) / 2.0, (a + b) / 2.0
    shape = np.broadcast(t_val, x, a).shape
    mass, ramp = np.zeros(shape), np.zeros(shape)
    for n in range(1, EIGEN_MAX_TERMS + 1):
        k = n * math.pi / side
        decay = np.exp(-k * k * t_val)
        coefficient = (2.0 / side) * np.sin(k * x) * decay / k
        mass = mass + coefficient * 2.0 * np.sin(k * mid) * np.sin(k * half)
        ramp = ramp + coefficient * (np.cos(k * mid) * np.sinc(k * half / math.pi) - np.cos(k * b))
        if 4.0 / (n * math.pi) * np.max(decay, initial=0.0) < SERIES_THRESHOLD:
            return mass, ramp
    _series_exhausted("segment eigen", t_val)


def interval_hat_masses(t_val: t.Any, x: t.Any, nodes: np.ndarray, side: float) -> np.ndarray:
    """
    ∫ p_D(t, x, y) h_b(y) dy for the piecewise-linear hats h_b on the nodes of (0, L), as a
    (len(t), len(x), len(nodes)) array. The first and last hats stay flat out to the endpoints.
    """
    ts = np.atleast_1d(np.asarray(t_val, dtype=float))[:, None, None]
    xs = np.atleast_1d(np.asarray(x, dtype=float))[None, :, None]
    knots = np.concatenate([[0.0], np.asarray(nodes, dtype=float), [side]])
    a, b = knots[None, None, :-1], knots[None, None, 1:]
    shape = (ts.shape[0], xs.shape[1], knots.size - 1)
    mass, ramp = np.empty(shape), np.empty(shape)
    small = ts[:, 0, 0] <= side * side / 4.0
    for rows, series in ((small, _segment_images), (~small, _segment_eigen)):
        if np.any(rows):
            mass[rows], ramp[rows] = series(ts[rows], xs, a, b, side)
    hats = ramp[:, :, :-1] + mass[:, :, 1:] - ramp[:, :, 1:]
    hats[:, :, 0] += mass[:, :, 0] - ramp[:, :, 0]
    hats[:, :, -1] += ramp[:, :, -1]
    return hats


def hat_weights(x: t.Any, nodes: np.ndarray) -> np.ndarray:
    """Values of the hats at x, shape (len(x), len(nodes)); the limit of interval_hat_masses as t ↓ 0."""
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    return np.stack([np.interp(xs, nodes, unit) for unit in np.eye(len(nodes))], axis=-1)


# ---------------------------------------------------------------------------------------------
# Box kernels


def _points(domain: BoxDomain, x: t.Any) -> tuple[np.ndarray, bool]:
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    boundary_distance(domain, pts)
    return pts, single


def _interior_points(domain: BoxDomain, x: t.Any, what: str) -> tuple[np.ndarray, bool, np.ndarray]:
    pts, single = _points(domain, x)
    delta = np.asarray(boundary_distance(domain, pts))
    if np.any(delta <= 0):
        raise DomainError(f"{what} is infinite or undefined on the boundary")
    return pts, single, delta


def _scalar_or(values: np.ndarray, single: bool) -> float | np.ndarray:
    return float(values[0]) if single else values


def first_eigenvalue(domain: BoxDomain) -> float:
    return float(math.pi**2 * np.sum(domain.lengths**-2.0))


def _box_kernel(domain: BoxDomain, ts: np.ndarray, x: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """p_D(t, x, y) as a (len(ts), len(ys)) array, x one point or one point per y."""
    x = np.broadcast_to(x, ys.shape)
    out = np.ones((ts.size, ys.shape[0]))
    for axis, side in enumerate(domain.sides):
        out = out * interval_kernel(ts[:, None], x[None, :, axis], ys[None, :, axis], side)
    return out


def heat_kernel(domain: BoxDomain, t_val: float, x: t.Any, y: t.Any) -> float | np.ndarray:
    """Dirichlet heat kernel p_D(t, x, y) as a product of interval kernels."""
    if not t_val > 0:
        raise DomainError(f"t must be positive, got {t_val}")
    xs, single_x = _points(domain, x)
    ys, single_y = _points(domain, y)
    xs, ys = np.broadcast_arrays(xs, ys)
    values = _box_kernel(domain, np.array([float(t_val)]), xs, ys)[0]
    return _scalar_or(values, single_x and single_y)


def heat_kernel_eigen(domain: BoxDomain, t_val: float, x: t.Any, y: t.Any) -> float | np.ndarray:
    xs, single_x = _points(domain, x)
    ys, single_y = _points(domain, y)
    xs, ys = np.broadcast_arrays(xs, ys)
    values = np.ones(xs.shape[0])
    for axis, side in enumerate(domain.sides):
        values = values * interval_kernel_eigen(t_val, xs[:, axis], ys[:, axis], side)
    return _scalar_or(values, single_x and single_y)


def _axis_arrays(
    fn: t.Callable[..., np.ndarray], domain: BoxDomain, ts: np.ndarray, pts: np.ndarray
) -> list[np.ndarray]:
    return [fn(ts[:, None], pts[None, :, axis], side) for axis, side in enumerate(domain.sides)]


def _survival_arrays(domain: BoxDomain, ts: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return np.prod(_axis_arrays(interval_survival, domain, ts, pts), axis=0)


def _exit_arrays(domain: BoxDomain, ts: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """1 − ∏ S_i computed as −expm1(Σ log S_i) to keep tiny exit probabilities."""
    exits = _axis_arrays(interval_exit_probability, domain, ts, pts)
    log_survival = np.zeros_like(exits[0])
    for exit_prob in exits:
        with np.errstate(divide="ignore"):
            log_survival = log_survival + np.where(exit_prob < 0.5, np.log1p(-exit_prob), np.log(1.0 - exit_prob))
    return -np.expm1(log_survival)


def _exit_density_arrays(domain: BoxDomain, ts: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """B(t, x) = Σ_i F_i(t, x_i) ∏_{k≠i} S_k(t, x_k)."""
    fluxes = _axis_arrays(interval_exit_density, domain, ts, pts)
    survivals = _axis_arrays(interval_survival, domain, ts, pts)
    total = np.zeros_like(fluxes[0])
    for axis in range(domain.d):
        term = fluxes[axis]
        for other in range(domain.d):
            if other != axis:
                term = term * survivals[other]
        total = total + term
    return total


def survival(domain: BoxDomain, t_val: float, x: t.Any) -> float | np.ndarray:
    """P_x(τ_D > t) = ∏_i S_i(t, x_i)."""
    if not t_val > 0:
        raise DomainError(f"t must be positive, got {t_val}")
    pts, single = _points(domain, x)
    return _scalar_or(_survival_arrays(domain, np.array([float(t_val)]), pts)[0], single)


def exit_density(domain: BoxDomain, t_val: float, x: t.Any) -> float | np.ndarray:
    """Exit-time density B(t, x) = ∫_∂D (−∂_n p_D(t, x, z)) σ(dz)."""
    pts, single = _points(domain, x)
    return _scalar_or(_exit_density_arrays(domain, np.array([float(t_val)]), pts)[0], single)


# ---------------------------------------------------------------------------------------------
# Time quadrature


@dataclass(frozen=True, eq=False)
class TimeRule:
    """Composite Gauss–Legendre rule in log t; weights carry the Jacobian t."""

    nodes: np.ndarray
    weights: np.ndarray
    t_min: float
    t_max: float

    @classmethod
    def log_panels(
        cls: type[t.Self], t_min: float, t_max: float, per_decade: int = 4, order: int = 10
    ) -> t.Self:
        if not 0 < t_min < t_max:
            raise DomainError(f"time rule needs 0 < t_min < t_max, got ({t_min}, {t_max})")
        panels = max(1, math.ceil(math.log10(t_max / t_min) * per_decade))
        edges = np.linspace(math.log(t_min), math.log(t_max), panels + 1)
        z, w = legendre.leggauss(order)
        half = (edges[1:] - edges[:-1])[:, None] / 2.0
        mid = (edges[1:] + edges[:-1])[:, None] / 2.0
        s = (mid + half * z[None, :]).ravel()
        nodes = np.exp(s)
        return cls(nodes=nodes, weights=(half * w[None, :]).ravel() * nodes, t_min=t_min, t_max=t_max)

    def integrate(self: t.Self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=([0], [0]))


def _cp_sum(weights: np.ndarray, factors: t.Sequence[np.ndarray]) -> np.ndarray:
    """Σ_t w[t] ∏_k factors[k][t, i_k] as a tensor over (i_1, ..., i_d)."""
    lead = weights[:, None] * factors[0]
    if len(factors) == 1:
        return lead.sum(axis=0)
    for factor in factors[1:-1]:
        lead = (lead[:, :, None] * factor[:, None, :]).reshape(lead.shape[0], -1)
    return (lead.T @ factors[-1]).reshape(tuple(f.shape[1] for f in factors))


def _grid_time_rule(grid: Grid) -> TimeRule:
    return TimeRule.log_panels(grid.min_distance**2 / 400.0, SURVIVAL_DECAY / first_eigenvalue(grid.domain))


def _frozen(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


@functools.lru_cache(maxsize=16)
def poisson_sigma_grid(spec: BernsteinSpec, grid: Grid) -> np.ndarray:
    """Pσ on every grid node via the rank-structured time quadrature."""
    rule = _grid_time_rule(grid)
    weights = rule.weights * np.asarray(potential_density(spec, rule.nodes))
    domain = grid.domain
    fluxes = [interval_exit_density(rule.nodes[:, None], nodes[None, :], side) for (nodes, _), side in zip(grid.axes, domain.sides)]
    survivals = [interval_survival(rule.nodes[:, None], nodes[None, :], side) for (nodes, _), side in zip(grid.axes, domain.sides)]
    total = np.zeros(grid.shape)
    for axis in range(domain.d):
        factors = [fluxes[k] if k == axis else survivals[k] for k in range(domain.d)]
        total = total + _cp_sum(weights, factors)
    LOGGER.debug("Pσ on %s grid with %d time nodes", grid.shape, rule.nodes.size)
    return _frozen(total)


@functools.lru_cache(maxsize=16)
def green_of_one_grid(spec: BernsteinSpec, grid: Grid) -> np.ndarray:
    """G^φ_D 1 = ∫ S(t, x) 𝔲(t) dt on every grid node."""
    rule = _grid_time_rule(grid)
    weights = rule.weights * np.asarray(potential_density(spec, rule.nodes))
    survivals = [interval_survival(rule.nodes[:, None], nodes[None, :], side) for (nodes, _), side in zip(grid.axes, grid.domain.sides)]
    return _frozen(_cp_sum(weights, survivals) + potential_measure(spec, rule.t_min))


def _many_rule(delta_min: float, domain: BoxDomain, t_top: float | None = None) -> TimeRule:
    return TimeRule.log_panels(delta_min**2 / 400.0, t_top or SURVIVAL_DECAY / first_eigenvalue(domain))


def poisson_sigma_many(spec: BernsteinSpec, domain: BoxDomain, points: np.ndarray) -> np.ndarray:
    pts, _, delta = _interior_points(domain, points, "P^φ_D σ")
    rule = _many_rule(float(delta.min()), domain)
    weights = rule.weights * np.asarray(potential_density(spec, rule.nodes))
    return weights @ _exit_density_arrays(domain, rule.nodes, pts)


def green_of_one_many(spec: BernsteinSpec, domain: BoxDomain, points: np.ndarray) -> np.ndarray:
    pts, _, delta = _interior_points(domain, points, "G^φ_D 1")
    rule = _many_rule(float(delta.min()), domain)
    weights = rule.weights * np.asarray(potential_density(spec, rule.nodes))
    return weights @ _survival_arrays(domain, rule.nodes, pts) + potential_measure(spec, rule.t_min)


def killing_kappa_many(spec: BernsteinSpec, domain: BoxDomain, points: np.ndarray) -> np.ndarray:
    """κ(x) = ∫ B(t, x) μ̄(t) dt for many points."""
    pts, _, delta = _interior_points(domain, points, "κ")
    if spec.family is Family.IDENTITY:
        return np.zeros(pts.shape[0])
    rule = _many_rule(float(delta.min()), domain)
    weights = rule.weights * np.asarray(levy_tail(spec, rule.nodes))
    return weights @ _exit_density_arrays(domain, rule.nodes, pts)


# ---------------------------------------------------------------------------------------------
# Green potentials of grid data


# floats held by one block of time-batched intermediates
BLOCK_FLOATS = 1 << 22


def _axis_apply(matrices: np.ndarray, tensor: np.ndarray, axis: int) -> np.ndarray:
    """out[t, ..., i, ...] = Σ_b matrices[t, i, b] tensor[t, ..., b, ...] along `axis`."""
    moved = np.moveaxis(tensor, axis, -1)
    shape = moved.shape
    flat = np.ascontiguousarray(moved).reshape(shape[0], -1, shape[-1])
    out = np.matmul(flat, matrices.transpose(0, 2, 1)).reshape(*shape[:-1], matrices.shape[1])
    return np.moveaxis(out, -1, axis)


@dataclass(frozen=True, eq=False)
class GridGreen:
    """
    G^φ_D g = ∫ 𝔲(t) P^D_t g dt for data g on a Grid.

    g is read as the tensor product of piecewise-linear hats on the grid nodes and P^D_t of every
    hat is exact, so the operator stays positive and needs no smoothness of g up to ∂D. Below
    the first time node P^D_t g is replaced by g itself.
    """

    spec: BernsteinSpec
    grid: Grid
    rule: TimeRule
    weights: np.ndarray
    tail: float
    hats: tuple[np.ndarray, ...]

    def _check(self: t.Self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != self.grid.shape:
            raise GridMismatchError(f"samples of shape {values.shape} do not match grid shape {self.grid.shape}")
        return values

    def on_grid(self: t.Self, values: np.ndarray) -> np.ndarray:
        values = self._check(values)
        total = self.tail * values
        step = max(1, BLOCK_FLOATS // values.size)
        for start in range(0, self.weights.size, step):
            block = slice(start, start + step)
            out = np.broadcast_to(values, (self.weights[block].size, *values.shape))
            for axis, hats in enumerate(self.hats):
                out = _axis_apply(hats[block], out, axis + 1)
            total = total + np.tensordot(self.weights[block], out, axes=([0], [0]))
        return total

    def at(self: t.Self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """G^φ_D g at arbitrary interior points, chunked over the points."""
        values = self._check(values)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        axes = [(nodes, side) for (nodes, _), side in zip(self.grid.axes, self.grid.domain.sides)]
        n = self.grid.shape[0]
        chunk = max(1, BLOCK_FLOATS // (self.weights.size * n ** max(self.grid.domain.d - 1, 1)))
        out = np.empty(pts.shape[0])
        for start in range(0, pts.shape[0], chunk):
            part = pts[start : start + chunk]
            factors = [interval_hat_masses(self.rule.nodes, part[:, k], nodes, side) for k, (nodes, side) in enumerate(axes)]
            body = _contract_points(factors, values, time_axis=True)
            local = _contract_points([hat_weights(part[:, k], nodes) for k, (nodes, _) in enumerate(axes)], values)
            out[start : start + chunk] = self.weights @ body + self.tail * local
        return out


def _contract_points(factors: t.Sequence[np.ndarray], values: np.ndarray, time_axis: bool = False) -> np.ndarray:
    """Σ_b values[b_1, ..., b_d] ∏_k factors[k][..., p, b_k], one point p per row of the factors."""
    lead = factors[0] if time_axis else factors[0][None]
    n = values.shape[0]
    acc = (lead.reshape(-1, n) @ values.reshape(n, -1)).reshape(*lead.shape[:2], *values.shape[1:])
    for factor in factors[1:]:
        factor = factor if time_axis else factor[None]
        rest = acc.shape[3:]
        acc = np.matmul(factor[:, :, None, :], acc.reshape(*acc.shape[:3], -1)).reshape(*acc.shape[:2], *rest)
    return acc if time_axis else acc[0]


@functools.lru_cache(maxsize=8)
def grid_green(spec: BernsteinSpec, grid: Grid) -> GridGreen:
    """The product-integration Green operator of a grid, with its hat matrices built once."""
    rule = TimeRule.log_panels(
        grid.min_distance**2 / 400.0, SURVIVAL_DECAY / first_eigenvalue(grid.domain), per_decade=2, order=8
    )
    weights = rule.weights * np.asarray(potential_density(spec, rule.nodes))
    hats = tuple(
        _frozen(interval_hat_masses(rule.nodes, nodes, nodes, side))
        for (nodes, _), side in zip(grid.axes, grid.domain.sides)
    )
    LOGGER.debug("Green operator on %s grid with %d time nodes", grid.shape, rule.nodes.size)
    return GridGreen(
        spec=spec, grid=grid, rule=rule, weights=_frozen(weights), tail=potential_measure(spec, rule.t_min), hats=hats
    )


# ---------------------------------------------------------------------------------------------
# Point evaluations by adaptive quadrature in log t


def _time_quad(integrand: t.Callable[[float], float], t_lo: float, t_hi: float, splits: t.Iterable[float], what: str) -> float:
    edges = sorted({math.log(t_lo), math.log(t_hi), *(math.log(s) for s in splits if t_lo < s < t_hi)})
    total, error = 0.0, 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        value, abserr = integrate.quad(
            lambda s: integrand(math.exp(s)) * math.exp(s), lo, hi, epsabs=0.0, epsrel=TIME_RTOL, limit=200
        )
        total += value
        error += abserr
    if error > 10 * TIME_RTOL * abs(total) + 1e-300:
        raise NumericalError(f"{what} time quadrature failed", {"value": total, "abserr": error})
    return total


def _face_splits(domain: BoxDomain, x: np.ndarray) -> list[float]:
    return [v * v for v in np.concatenate([x, domain.lengths - x])]


def poisson_sigma(spec: BernsteinSpec, domain: BoxDomain, x: t.Sequence[float]) -> float:
    """
    P^φ_D σ(x) = ∫_0^∞ B(t, x) 𝔲(t) dt.

    Raises:
        DomainError: x is on the boundary, where the value is infinite.
    """
    pts, _, delta = _interior_points(domain, x, "P^φ_D σ")
    point = pts[0]

    def integrand(tt: float) -> float:
        return float(_exit_density_arrays(domain, np.array([tt]), pts)[0, 0]) * float(potential_density(spec, tt))

    t_hi = SURVIVAL_DECAY / first_eigenvalue(domain)
    return _time_quad(integrand, float(delta[0]) ** 2 / 1e3, t_hi, _face_splits(domain, point), "P^φ_D σ")


def green_of_one(spec: BernsteinSpec, domain: BoxDomain, x: t.Sequence[float]) -> float:
    """G^φ_D 1(x) = ∫_0^∞ S(t, x) 𝔲(t) dt, the expected lifetime of the subordinate process."""
    pts, _, delta = _interior_points(domain, x, "G^φ_D 1")
    t_lo = float(delta[0]) ** 2 / 1e3

    def integrand(tt: float) -> float:
        return float(_survival_arrays(domain, np.array([tt]), pts)[0, 0]) * float(potential_density(spec, tt))

    t_hi = SURVIVAL_DECAY / first_eigenvalue(domain)
    body = _time_quad(integrand, t_lo, t_hi, _face_splits(domain, pts[0]), "G^φ_D 1")
    return body + potential_measure(spec, t_lo)


def killing_kappa(spec: BernsteinSpec, domain: BoxDomain, x: t.Sequence[float]) -> float:
    """κ(x) = ∫_0^∞ (1 − ∫_D p_D(t, x, y) dy) μ(t) dt."""
    pts, _, delta = _interior_points(domain, x, "κ")
    if spec.family is Family.IDENTITY:
        return 0.0

    def integrand(tt: float) -> float:
        return float(_exit_arrays(domain, np.array([tt]), pts)[0, 0]) * float(levy_density(spec, tt))

    t_hi = SURVIVAL_DECAY / first_eigenvalue(domain)
    body = _time_quad(integrand, float(delta[0]) ** 2 / 1e3, t_hi, _face_splits(domain, pts[0]), "κ")
    return body + float(levy_tail(spec, t_hi))


def jumping_kernel_JD(spec: BernsteinSpec, domain: BoxDomain, x: t.Sequence[float], y: t.Sequence[float]) -> float:
    """
    J_D(x, y) = ∫_0^∞ p_D(t, x, y) μ(t) dt.

    Raises:
        DomainError: x and y coincide.
    """
    xs, _ = _points(domain, x)
    ys, _ = _points(domain, y)
    r2 = float(np.sum((xs[0] - ys[0]) ** 2))
    if r2 == 0:
        raise DomainError("J_D is singular at coincident points")
    if spec.family is Family.IDENTITY:
        return 0.0

    def integrand(tt: float) -> float:
        return float(_box_kernel(domain, np.array([tt]), xs[0], ys)[0, 0]) * float(levy_density(spec, tt))

    splits = [r2, float(boundary_distance(domain, xs[0])) ** 2, float(boundary_distance(domain, ys[0])) ** 2]
    t_hi = SURVIVAL_DECAY / first_eigenvalue(domain)
    return _time_quad(integrand, r2 / 1e3, t_hi, splits, "J_D")


def green_kernel(spec: BernsteinSpec, domain: BoxDomain, x: t.Sequence[float], y: t.Sequence[float]) -> float:
    """G^φ_D(x, y) = ∫_0^∞ p_D(t, x, y) 𝔲(t) dt."""
    xs, _ = _points(domain, x)
    ys, _ = _points(domain, y)
    r2 = float(np.sum((xs[0] - ys[0]) ** 2))
    if r2 == 0:
        raise DomainError("the Green kernel is singular at coincident points")

    def integrand(tt: float) -> float:
        return float(_box_kernel(domain, np.array([tt]), xs[0], ys)[0, 0]) * float(potential_density(spec, tt))

    t_hi = SURVIVAL_DECAY / first_eigenvalue(domain)
    return _time_quad(integrand, r2 / 1e3, t_hi, [r2], "G^φ_D")


def jumping_kernel_JD_many(spec: BernsteinSpec, domain: BoxDomain, x: np.ndarray, ys: np.ndarray) -> np.ndarray:
    r2 = np.sum((ys - x[None, :]) ** 2, axis=1)
    if np.any(r2 == 0):
        raise DomainError("J_D is singular at coincident points")
    rule = _many_rule(math.sqrt(float(r2.min())), domain)
    weights = rule.weights * np.asarray(levy_density(spec, rule.nodes))
    return weights @ _box_kernel(domain, rule.nodes, x, ys)


def jump_gap_many(spec: BernsteinSpec, domain: BoxDomain, x: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """
    j(|x − y|) − J_D(x, y) = ∫ (p − p_D) μ dt, with p − p_D expanded axis by axis so that
    no free-space term is subtracted from itself.
    """
    delta = float(boundary_distance(domain, x))
    rule = TimeRule.log_panels(delta**2 / 400.0, 1e6)
    weights = rule.weights * np.asarray(levy_density(spec, rule.nodes))
    ts = rule.nodes[:, None]
    xb = np.broadcast_to(x, ys.shape)
    free = [_gauss(xb[None, :, axis] - ys[None, :, axis], ts) for axis in range(domain.d)]
    rem = [interval_kernel_remainder(ts, xb[None, :, axis], ys[None, :, axis], side) for axis, side in enumerate(domain.sides)]
    gap = np.zeros((rule.nodes.size, ys.shape[0]))
    for axis in range(domain.d):
        term = -rem[axis]
        for before in range(axis):
            term = term * free[before]
        for after in range(axis + 1, domain.d):
            term = term * (free[after] + rem[after])
        gap = gap + term
    return weights @ gap


def green_boundary_layer(spec: BernsteinSpec, domain: BoxDomain, x: t.Sequence[float], eta: float) -> float:
    """
    G^φ_D applied to the boundary layer f̃_η = (2/η²) 1{δ_D < η} at x.

    As η ↓ 0 this increases to P^φ_D σ(x).
    """
    pts, _, delta = _interior_points(domain, x, "boundary layer potential")
    if not 0 < eta < min(domain.sides) / 2:
        raise DomainError(f"layer width must lie in (0, min(L)/2), got {eta}")
    point = pts[0]

    def layer_mass(tt: float) -> float:
        ts = np.array([[tt]])
        whole = float(_survival_arrays(domain, np.array([tt]), pts)[0, 0])
        inner = 1.0
        for axis, side in enumerate(domain.sides):
            inner *= float(interval_mass(ts, point[axis], eta, side - eta, side)[0, 0])
        return whole - inner

    depth = float(delta[0])
    inside = depth < eta
    gap = eta - depth if inside else depth - eta
    t_lo = max(gap, 1e-6) ** 2 / 1e3
    splits = [v * v for v in np.abs(np.concatenate([point - eta, domain.lengths - eta - point]))]
    t_hi = SURVIVAL_DECAY / first_eigenvalue(domain)
    body = _time_quad(lambda tt: layer_mass(tt) * float(potential_density(spec, tt)), t_lo, t_hi, splits, "layer")
    if inside:
        body += potential_measure(spec, t_lo)
    return 2.0 / eta**2 * body


# ---------------------------------------------------------------------------------------------
# Pointwise principal-value operator


class PointwiseRule(BaseModel):
    """Node counts of the pointwise operator quadrature."""

    model_config = ConfigDict(frozen=True)

    sphere_order: int = 10
    inner_nodes: int = 12
    shell_nodes: int = 16
    outer_nodes: int = 24
    rho_cap: float = 0.05


def sphere_rule(d: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Antipodally symmetric directions and weights on S^{d−1}; weights sum to |S^{d−1}|."""
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    count = 2 * order
    phi = (np.arange(count) + 0.5) * 2.0 * math.pi / count
    if d == 2:
        return np.stack([np.cos(phi), np.sin(phi)], axis=-1), np.full(count, 2.0 * math.pi / count)
    z, w = legendre.leggauss(order)
    ring = np.sqrt(1.0 - z * z)
    dirs = np.stack(
        [np.outer(ring, np.cos(phi)).ravel(), np.outer(ring, np.sin(phi)).ravel(), np.repeat(z, count)], axis=-1
    )
    return dirs, np.repeat(w, count) * 2.0 * math.pi / count


def _exit_radius(domain: BoxDomain, x: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        upper = np.where(dirs > 0, (domain.lengths - x)[None, :] / dirs, np.inf)
        lower = np.where(dirs < 0, -x[None, :] / dirs, np.inf)
    return np.minimum(upper, lower).min(axis=1)


def finite_difference_hessian(u: t.Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    d = x.size
    eye = np.eye(d) * h
    hessian = np.empty((d, d))
    centre = float(u(x[None, :])[0])
    for i in range(d):
        pair = u(np.stack([x + eye[i], x - eye[i]]))
        hessian[i, i] = (pair[0] - 2.0 * centre + pair[1]) / h**2
        for j in range(i + 1, d):
            quad = u(np.stack([x + eye[i] + eye[j], x + eye[i] - eye[j], x - eye[i] + eye[j], x - eye[i] - eye[j]]))
            hessian[i, j] = hessian[j, i] = (quad[0] - quad[1] - quad[2] + quad[3]) / (4.0 * h * h)
    return hessian


def apply_pointwise(
    spec: BernsteinSpec,
    domain: BoxDomain,
    u: t.Callable[[np.ndarray], np.ndarray],
    x: t.Sequence[float],
    hessian: np.ndarray | None = None,
    rule: PointwiseRule | None = None,
    kappa: float | None = None,
) -> float:
    """
    P.V.∫_D (u(x) − u(y)) J_D(x, y) dy + κ(x) u(x).

    The ball B(x, ρ), ρ = min(δ_D(x)/2, ρ_cap), is integrated against the free kernel j with
    the second-order Taylor term subtracted and added back in closed form, plus the smooth
    correction (u(x) − u(y))(j − J_D). The rest of D is split into the shell ρ < r < δ_D(x)
    and the rays from δ_D(x) to the boundary.

    Args:
        u: Vectorized function mapping an (m, d) array of points to m values.
        hessian: Hessian of u at x; finite differences with step ρ/8 when None.

    Raises:
        DomainError: x on the boundary or the identity spec, which has no jump part.
        NumericalError: a time quadrature failed.
    """
    if spec.family is Family.IDENTITY:
        raise DomainError("the identity spec is a local operator without a pointwise jump representation")
    rule = rule or PointwiseRule()
    pts, _, delta_arr = _interior_points(domain, x, "the pointwise operator")
    point = pts[0]
    delta = float(delta_arr[0])
    d = domain.d
    rho = min(delta / 2.0, rule.rho_cap)
    dirs, dir_weights = sphere_rule(d, rule.sphere_order)
    sphere_area = float(dir_weights.sum())
    ux = float(u(point[None, :])[0])
    hess = finite_difference_hessian(u, point, rho / 8.0) if hessian is None else np.asarray(hessian, dtype=float)

    z, w = legendre.leggauss(rule.inner_nodes)
    r_in = rho * (z + 1.0) / 2.0
    w_in = rho * w / 2.0
    ys_in = point[None, None, :] + r_in[:, None, None] * dirs[None, :, :]
    u_in = u(ys_in.reshape(-1, d)).reshape(r_in.size, -1)
    quadratic = np.einsum("kd,de,ke->k", dirs, hess, dirs)
    compensated = u_in - ux - 0.5 * r_in[:, None] ** 2 * quadratic[None, :]
    radial = w_in * r_in ** (d - 1) * np.asarray(jump_kernel(spec, d, r_in, closed_form=True))
    inner = -float(radial @ (compensated @ dir_weights))
    inner -= np.trace(hess) / (2.0 * d) * sphere_area * jump_kernel_moment(spec, d, 0.0, rho, d + 1.0)
    gap = jump_gap_many(spec, domain, point, ys_in.reshape(-1, d)).reshape(r_in.size, -1)
    inner -= float((w_in * r_in ** (d - 1)) @ (((ux - u_in) * gap) @ dir_weights))

    z, w = legendre.leggauss(rule.shell_nodes)
    s = (z + 1.0) / 2.0
    log_ratio = math.log(delta / rho)
    r_shell = rho * np.exp(s * log_ratio)
    w_shell = w / 2.0 * r_shell * log_ratio
    ys_shell = (point[None, None, :] + r_shell[:, None, None] * dirs[None, :, :]).reshape(-1, d)

    z, w = legendre.leggauss(rule.outer_nodes)
    s = (z + 1.0) / 2.0
    radius = np.maximum(_exit_radius(domain, point, dirs), delta)
    log_span = np.log(radius / delta)
    exponent = 1.0 - (1.0 - s) ** 3
    r_out = delta * np.exp(exponent[:, None] * log_span[None, :])
    w_out = (w / 2.0 * 3.0 * (1.0 - s) ** 2)[:, None] * r_out * log_span[None, :]
    ys_out = (point[None, None, :] + r_out[:, :, None] * dirs[None, :, :]).reshape(-1, d)
    usable = (log_span > 0)[None, :].repeat(rule.outer_nodes, axis=0).ravel()

    ys_far = np.concatenate([ys_shell, ys_out[usable]])
    kernel = jumping_kernel_JD_many(spec, domain, point, ys_far)
    u_far = u(ys_far)
    n_shell = ys_shell.shape[0]
    shell_terms = ((ux - u_far[:n_shell]) * kernel[:n_shell]).reshape(r_shell.size, -1)
    shell = float((w_shell * r_shell ** (d - 1)) @ (shell_terms @ dir_weights))
    outer_terms = np.zeros(usable.size)
    outer_terms[usable] = (ux - u_far[n_shell:]) * kernel[n_shell:]
    outer_terms = outer_terms.reshape(rule.outer_nodes, -1) * w_out * r_out ** (d - 1)
    outer = float(outer_terms.sum(axis=0) @ dir_weights)

    kappa_x = killing_kappa(spec, domain, point) if kappa is None else kappa
    LOGGER.debug(
        "pointwise operator at %s: inner=%.6g shell=%.6g outer=%.6g kappa=%.6g", point, inner, shell, outer, kappa_x
    )
    return inner + shell + outer + kappa_x * ux


# ---------------------------------------------------------------------------------------------
# Diagnostics


def chapman_kolmogorov_gap(side: float, s_val: float, t_val: float, x: float, y: float, nodes: int = 200) -> float:
    """|∫ p_D(s, x, z) p_D(t, z, y) dz − p_D(s + t, x, y)| on the interval (0, L)."""
    z, w = legendre.leggauss(nodes)
    zs = side * (z + 1.0) / 2.0
    ws = side * w / 2.0
    lhs = float(np.sum(ws * interval_kernel(s_val, x, zs, side) * interval_kernel(t_val, zs, y, side)))
    return abs(lhs - float(interval_kernel(s_val + t_val, x, y, side)))


def heat_kernel_ratio_table(
    domain: BoxDomain, deltas: t.Sequence[float] | None = None, times: t.Sequence[float] | None = None
) -> RatioTable:
    """p_D(t, x, y) / ([δδ′/t ∧ 1] t^{−d/2} e^{−|x−y|²/4t}) for pairs on face-normal lines."""
    depth = deltas if deltas is not None else log_grid(0.01, 0.4 * min(domain.sides), 6)
    ts = times if times is not None else log_grid(1e-4, 0.25 * min(domain.sides) ** 2, 6)
    samples = face_normal_points(domain, depth)
    points, values = [], []
    for tt in ts:
        for first in samples:
            for second in samples:
                if first.face != second.face:
                    continue
                r2 = float(np.sum((first.point - second.point) ** 2))
                scale = min(first.delta * second.delta / tt, 1.0) * tt ** (-domain.d / 2.0) * math.exp(-r2 / (4 * tt))
                values.append(float(heat_kernel(domain, tt, first.point, second.point)) / scale)
                points.append(float(tt))
    return RatioTable(label="p_D/two_sided", points=points, values=values)


def jd_ratio_table(spec: BernsteinSpec, domain: BoxDomain, deltas: t.Sequence[float] | None = None) -> RatioTable:
    """J_D(x, y) / ((δδ′/|x−y|² ∧ 1) j(|x−y|)) with x on face-normal lines and y at the center."""
    depth = deltas if deltas is not None else log_grid(0.01, 0.3 * min(domain.sides), 8)
    centre = domain.center
    delta_c = float(boundary_distance(domain, centre))
    points, values = [], []
    for sample in face_normal_points(domain, depth):
        r = float(np.linalg.norm(sample.point - centre))
        scale = min(sample.delta * delta_c / r**2, 1.0) * float(jump_kernel(spec, domain.d, r, closed_form=True))
        values.append(jumping_kernel_JD(spec, domain, sample.point, centre) / scale)
        points.append(sample.delta)
    return RatioTable(label="J_D/two_sided", points=points, values=values)


def green_kernel_ratio_table(spec: BernsteinSpec, domain: BoxDomain, deltas: t.Sequence[float] | None = None) -> RatioTable:
    """
    G^φ_D(x, y) against (δδ′/|x−y|² ∧ 1) / (|x−y|^d φ(|x−y|^{−2})).

    Recorded as a diagnostic only.
    """
    depth = deltas if deltas is not None else log_grid(0.01, 0.3 * min(domain.sides), 6)
    centre = domain.center
    delta_c = float(boundary_distance(domain, centre))
    points, values = [], []
    for sample in face_normal_points(domain, depth):
        r = float(np.linalg.norm(sample.point - centre))
        scale = min(sample.delta * delta_c / r**2, 1.0) / (r**domain.d * float(phi_eval(spec, r**-2)))
        values.append(green_kernel(spec, domain, sample.point, centre) / scale)
        points.append(sample.delta)
    return RatioTable(label="G_D/two_sided", points=points, values=values)


def poisson_sigma_profile(
    spec: BernsteinSpec, domain: BoxDomain, deltas: t.Sequence[float] | None = None
) -> RatioTable:
    """Pσ(x) δ² φ(δ^{−2}) at face-normal points, which stays bounded above and below."""
    depth = deltas if deltas is not None else log_grid(0.02, 0.3 * min(domain.sides), 10)
    samples = face_normal_points(domain, depth)
    points = np.array([sample.point for sample in samples])
    deltas_arr = np.array([sample.delta for sample in samples])
    values = poisson_sigma_many(spec, domain, points) * deltas_arr**2 * np.asarray(phi_eval(spec, deltas_arr**-2.0))
    return RatioTable(label="Psigma*delta^2*phi(delta^-2)", points=deltas_arr.tolist(), values=values.tolist())


class SpectralIdentities(BaseModel):
    """Max relative coefficient errors of G^φ φ(−Δ) = I and G^φ G^{φ*} = G on a random field."""

    cutoff: int
    inverse_error: float
    conjugate_error: float
    limit: float = 1e-12

    @property
    def passed(self: t.Self) -> bool:
        return self.inverse_error < self.limit and self.conjugate_error < self.limit


def _relative_gap(got: np.ndarray, want: np.ndarray) -> float:
    return float(np.max(np.abs(got - want)) / np.max(np.abs(want)))


def spectral_identities(
    spec: BernsteinSpec, conjugate_spec: BernsteinSpec, domain: BoxDomain, cutoff: int = 16, seed: int = 0
) -> SpectralIdentities:
    basis = EigenBasis(domain, cutoff)
    field = SpectralField(basis, np.random.default_rng(seed).standard_normal(basis.shape))
    round_trip = green_apply(apply_phi_op(field, spec), spec)
    composed = green_apply(green_apply(field, conjugate_spec), spec)
    return SpectralIdentities(
        cutoff=cutoff,
        inverse_error=_relative_gap(round_trip.coefficients, field.coefficients),
        conjugate_error=_relative_gap(composed.coefficients, classical_green(field).coefficients),
    )


class PointwiseAgreement(BaseModel):
    points: list[list[float]]
    pointwise: list[float]
    spectral: list[float]
    sup_norm: float
    max_error: float
    limit: float = 0.02

    @property
    def passed(self: t.Self) -> bool:
        return self.max_error < self.limit

    def rows(self: t.Self) -> list[list[t.Any]]:
        return [[*p, a, b] for p, a, b in zip(self.points, self.pointwise, self.spectral)]


def pointwise_agreement(
    spec: BernsteinSpec,
    domain: BoxDomain,
    cutoff: int = 8,
    count: int = 10,
    min_delta: float = 0.2,
    seed: int = 0,
    rule: PointwiseRule | None = None,
    nodes_per_half: int = 24,
) -> PointwiseAgreement:
    """
    apply_pointwise against apply_phi_op for a band-limited random field with decaying
    coefficients, at interior points with δ_D ≥ min_delta, relative to ‖apply_phi_op u‖_∞ on the grid.
    """
    rng = np.random.default_rng(seed)
    basis = EigenBasis(domain, cutoff)
    decay = 1.0 / (1.0 + basis.lambda_tensor)
    field = SpectralField(basis, rng.standard_normal(basis.shape) * decay)
    applied = apply_phi_op(field, spec)
    grid = Grid(domain, nodes_per_half)
    sup_norm = float(np.max(np.abs(applied.on_grid(grid))))
    margin = np.minimum(min_delta, domain.lengths / 2.0)
    points = margin + rng.random((count, domain.d)) * (domain.lengths - 2.0 * margin)
    kappas = killing_kappa_many(spec, domain, points)
    pointwise = [
        apply_pointwise(spec, domain, field.evaluate, point, rule=rule, kappa=float(kappa))
        for point, kappa in zip(points, kappas)
    ]
    spectral = applied.evaluate(points)
    error = float(np.max(np.abs(np.asarray(pointwise) - spectral))) / sup_norm
    if error >= 0.02:
        LOGGER.warning("pointwise and spectral operators differ by %.3g of the sup norm", error)
    return PointwiseAgreement(
        points=points.tolist(),
        pointwise=pointwise,
        spectral=spectral.tolist(),
        sup_norm=sup_norm,
        max_error=error,
    )
