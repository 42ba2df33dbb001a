"""Moderate solutions u_j, their monotone ladder, the boundary-blow-up supersolution and the large solution."""

from __future__ import annotations

import functools
import logging
import math
import typing as t
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict

from modules.bernstein import BernsteinSpec, renewal_proxy
from modules.domain import BoxDomain, EigenBasis, boundary_distance, face_normal_points
from modules.errors import ConditionError, ConstructionError, DomainError, GridMismatchError, NonConvergenceError
from modules.nonlinearity import Nonlinearity, NonlinearityFamily, Verdict, check_F, constants, ko_checks, ko_psi
from modules.operators import (
    Grid,
    GridGreen,
    PointwiseRule,
    SpectralField,
    apply_pointwise,
    expand,
    green_of_one_grid,
    green_of_one_many,
    grid_green,
    poisson_sigma_grid,
    poisson_sigma_many,
)
from modules.utils import parallel_map

LOGGER = logging.getLogger(__name__)

PROFILE_DELTAS = (0.2, 0.1, 0.05, 0.02)
LAYER_DELTAS = (0.02, 0.03, 0.05, 0.07, 0.09, 0.11, 0.13, 0.15, 0.17, 0.19)
SHELL_WIDTHS = (0.2, 0.1, 0.05)
DOMINATION_LIMIT = 0.05
# λ = C^{1/m} (1 + SUPERSOLUTION_SAFETY)
SUPERSOLUTION_SAFETY = 1.1


class SolverOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    cutoff: int = 16
    nodes_per_half: int = 32
    grading: float = 3.0
    theta: float = 0.5
    theta_floor: float = 1.0 / 64.0
    tol: float = 1e-8
    k_max: int = 500
    interior_delta: float = 0.2
    check_points: int = 10
    residuals: bool = True
    # residual_interior must stay below residual_tolerance · max f(u_j) over the check points
    residual_tolerance: float = 1e-2
    seed: int = 0
    workers: int = 1
    pointwise: PointwiseRule = PointwiseRule()


@dataclass(frozen=True)
class _Context:
    grid: Grid
    basis: EigenBasis
    green: GridGreen
    poisson: np.ndarray
    delta: np.ndarray


@functools.lru_cache(maxsize=8)
def _context(spec: BernsteinSpec, domain: BoxDomain, cutoff: int, nodes_per_half: int, grading: float) -> _Context:
    grid = Grid(domain, nodes_per_half, grading)
    return _Context(
        grid=grid,
        basis=EigenBasis(domain, cutoff),
        green=grid_green(spec, grid),
        poisson=poisson_sigma_grid(spec, grid),
        delta=grid.distance_tensor(),
    )


def _context_for(spec: BernsteinSpec, domain: BoxDomain, opts: SolverOptions) -> _Context:
    return _context(spec, domain, opts.cutoff, opts.nodes_per_half, opts.grading)


def _check_points(domain: BoxDomain, opts: SolverOptions) -> np.ndarray:
    rng = np.random.default_rng(opts.seed)
    lo = np.full(domain.d, opts.interior_delta)
    return rng.uniform(lo, domain.lengths - lo, size=(opts.check_points, domain.d))


class ProfileRow(t.NamedTuple):
    delta: float
    face: str
    min_ratio: float
    max_ratio: float


class Residual(t.NamedTuple):
    point: tuple[float, ...]
    value: float
    scale: float


@dataclass
class ModerateSolution:
    """
    u_j = j Pσ − G^φ_D f(u_j) on the solver grid.

    `source` holds f(u_j) on the grid and `correction` its Green potential there. Off the grid
    u_j(y) = clip(j Pσ(y) − G^φ_D f(u_j)(y), 0, j Pσ(y)) goes through the same Green operator.
    """

    j: int
    spec: BernsteinSpec
    nl: Nonlinearity
    grid: Grid
    basis: EigenBasis
    values: np.ndarray
    poisson: np.ndarray
    source: np.ndarray
    correction: np.ndarray
    iterations: int
    history: list[float]
    residual_tolerance: float = 1e-2
    residuals: list[Residual] = field(default_factory=list)
    boundary_profile: list[ProfileRow] = field(default_factory=list)

    @property
    def domain(self: t.Self) -> BoxDomain:
        return self.grid.domain

    def to_field(self: t.Self) -> SpectralField:
        return expand(self.values, self.grid, self.basis)

    @property
    def residual_interior(self: t.Self) -> float:
        return max((abs(r.value) for r in self.residuals), default=0.0)

    @property
    def residual_scale(self: t.Self) -> float:
        """max f(u_j) over the check points."""
        return max((r.scale for r in self.residuals), default=0.0)

    @property
    def residual_ok(self: t.Self) -> bool:
        return self.residual_interior <= self.residual_tolerance * self.residual_scale

    def correction_at(self: t.Self, points: np.ndarray) -> np.ndarray:
        return grid_green(self.spec, self.grid).at(self.source, points)

    def evaluate(self: t.Self, points: np.ndarray, poisson: np.ndarray | None = None) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        p_sigma = poisson_sigma_many(self.spec, self.domain, pts) if poisson is None else poisson
        target = self.j * p_sigma
        return np.clip(target - self.correction_at(pts), 0.0, target)


def _green_of_f(nl: Nonlinearity, ctx: _Context, v: np.ndarray) -> np.ndarray:
    return ctx.green.on_grid(np.asarray(nl.value(v), dtype=float))


def _integrability_guard(nl: Nonlinearity, ctx: _Context, j: int) -> None:
    weighted = ctx.grid.integrate(np.asarray(nl.value(j * ctx.poisson)) * ctx.delta)
    if not math.isfinite(weighted):
        raise ConditionError(f"f(j Pσ) is not integrable against δ_D on the graded grid for j={j}")


def solve_moderate(
    j: int, nl: Nonlinearity, spec: BernsteinSpec, domain: BoxDomain, opts: SolverOptions | None = None
) -> ModerateSolution:
    """
    Solve φ(−Δ|_D) u = −f(u) with u/Pσ → j at ∂D by damped Picard iteration
    v ← (1−θ)v + θ(j Pσ − G^φ_D f(v)), projected onto [0, j Pσ].

    Raises:
        ConditionError: f fails the F-condition or f(j Pσ) is not integrable on the grid.
        NonConvergenceError: k_max iterations were reached, with the step history attached.
    """
    opts = opts or SolverOptions()
    if j < 1:
        raise DomainError(f"boundary multiplier j must be a positive integer, got {j}")
    if nl.family is not NonlinearityFamily.ZERO:
        f_constants = check_F(nl)
        if not f_constants.holds:
            raise ConditionError(f"nonlinearity {nl.label} fails the F-condition: {f_constants.reason}")
    ctx = _context_for(spec, domain, opts)
    if nl.family is NonlinearityFamily.ZERO:
        # the fixed point is explicit
        v, history = j * ctx.poisson, [0.0]
    else:
        _integrability_guard(nl, ctx, j)
        v, history = _picard(j, nl, ctx, opts)

    source = np.asarray(nl.value(v), dtype=float)
    solution = ModerateSolution(
        j=j,
        spec=spec,
        nl=nl,
        grid=ctx.grid,
        basis=ctx.basis,
        values=v,
        poisson=ctx.poisson,
        source=source,
        correction=ctx.green.on_grid(source),
        iterations=len(history),
        history=history,
        residual_tolerance=opts.residual_tolerance,
    )
    LOGGER.info("u_%d converged in %d iterations", j, solution.iterations)
    if opts.residuals:
        solution.residuals = interior_residuals(solution, _check_points(domain, opts), opts)
        if not solution.residual_ok:
            LOGGER.warning(
                "u_%d interior residual %.4g exceeds %.3g of max f(u_j) = %.4g",
                j,
                solution.residual_interior,
                opts.residual_tolerance,
                solution.residual_scale,
            )
    solution.boundary_profile = boundary_ratio_profile(solution)
    return solution


def _picard(j: int, nl: Nonlinearity, ctx: _Context, opts: SolverOptions) -> tuple[np.ndarray, list[float]]:
    target = j * ctx.poisson
    scale = 1.0 + ctx.poisson
    theta = opts.theta
    v = np.zeros(ctx.grid.shape)
    history: list[float] = []
    growing = 0
    for iteration in range(1, opts.k_max + 1):
        correction = _green_of_f(nl, ctx, v)
        update = np.clip((1.0 - theta) * v + theta * (target - correction), 0.0, target)
        step = float(np.max(np.abs(update - v) / scale))
        v = update
        if history and step > history[-1]:
            growing += 1
        else:
            growing = 0
        history.append(step)
        LOGGER.debug("j=%d iteration %d step %.3e theta %.4g", j, iteration, step, theta)
        if step < opts.tol:
            break
        if growing >= 2 and theta > opts.theta_floor:
            theta = max(theta / 2.0, opts.theta_floor)
            growing = 0
            LOGGER.warning("Picard steps grow for j=%d, damping reduced to %.4g", j, theta)
    else:
        raise NonConvergenceError(
            f"Picard iteration for j={j} did not reach {opts.tol:g} in {opts.k_max} steps",
            history=history,
            diagnostics={"theta": theta, "last_step": history[-1]},
        )
    return v, history


def interior_residuals(solution: ModerateSolution, points: np.ndarray, opts: SolverOptions) -> list[Residual]:
    """
    φ(−Δ|_D) u_j + f(u_j) at interior points.

    Pσ is φ(−Δ|_D)-harmonic in D, so φ(−Δ|_D) u_j = −φ(−Δ|_D) G^φ_D f(u_j) and only the
    correction goes through the pointwise operator, evaluated off the grid by the Green operator.
    """
    values = solution.evaluate(points)
    f_values = np.asarray(solution.nl.value(values))

    def one(k: int) -> Residual:
        applied = -apply_pointwise(solution.spec, solution.domain, solution.correction_at, points[k], rule=opts.pointwise)
        return Residual(point=tuple(float(c) for c in points[k]), value=applied + float(f_values[k]), scale=float(f_values[k]))

    return parallel_map(one, list(range(points.shape[0])), opts.workers)


def boundary_ratio_profile(
    solution: ModerateSolution, deltas: t.Sequence[float] = PROFILE_DELTAS, offsets: t.Sequence[float] = (0.0, 0.1, -0.1)
) -> list[ProfileRow]:
    """min/max of u_j/Pσ per face over face-normal points at each depth."""
    samples = face_normal_points(solution.domain, deltas, offsets)
    points = np.array([sample.point for sample in samples])
    p_sigma = poisson_sigma_many(solution.spec, solution.domain, points)
    ratios = solution.evaluate(points, p_sigma) / p_sigma
    rows = []
    for delta in deltas:
        for face in dict.fromkeys(s.face for s in samples):
            picked = [ratios[k] for k, s in enumerate(samples) if s.face == face and s.delta == delta]
            rows.append(ProfileRow(float(delta), face, float(min(picked)), float(max(picked))))
    return rows


def ratio_gap(profile: t.Sequence[ProfileRow], j: int, delta: float) -> float:
    """max |u_j/Pσ − j| over the faces at one depth."""
    rows = [row for row in profile if math.isclose(row.delta, delta)]
    if not rows:
        raise DomainError(f"no profile rows at depth {delta}")
    return max(max(abs(row.min_ratio - j), abs(row.max_ratio - j)) for row in rows)


# ---------------------------------------------------------------------------------------------
# Ladder


@dataclass
class ModerateLadder:
    solutions: list[ModerateSolution]
    monotone: bool
    max_decrease: float
    cauchy_gaps: list[float]
    interior_delta: float

    @property
    def grid(self: t.Self) -> Grid:
        return self.solutions[0].grid

    @property
    def J(self: t.Self) -> int:
        return len(self.solutions)

    @property
    def gaps_decreasing(self: t.Self) -> bool:
        return all(b < a for a, b in zip(self.cauchy_gaps, self.cauchy_gaps[1:]))

    @property
    def within_bounds(self: t.Self) -> bool:
        return all(np.all(s.values >= 0) and np.all(s.values <= s.j * s.poisson) for s in self.solutions)

    def summary(self: t.Self) -> dict[str, t.Any]:
        return {
            "J": self.J,
            "monotone": self.monotone,
            "max_decrease": self.max_decrease,
            "within_bounds": bool(self.within_bounds),
            "cauchy_gaps": self.cauchy_gaps,
            "gaps_decreasing": self.gaps_decreasing,
            "iterations": [s.iterations for s in self.solutions],
            "residual_interior": [s.residual_interior for s in self.solutions],
            "residual_scale": [s.residual_scale for s in self.solutions],
            "residual_ok": [s.residual_ok for s in self.solutions],
        }


def build_ladder(
    J: int, nl: Nonlinearity, spec: BernsteinSpec, domain: BoxDomain, opts: SolverOptions | None = None
) -> ModerateLadder:
    """u_1, ..., u_J with the pointwise monotonicity check and the interior Cauchy gaps on K = {δ_D ≥ δ_K}."""
    opts = opts or SolverOptions()
    if J < 1:
        raise DomainError(f"ladder length must be positive, got {J}")
    inner = opts.model_copy(update={"workers": 1})
    solutions = parallel_map(lambda j: solve_moderate(j, nl, spec, domain, inner), list(range(1, J + 1)), opts.workers)
    ctx = _context_for(spec, domain, opts)
    tolerance = 1e-6 * (1.0 + ctx.poisson)
    interior = ctx.delta >= opts.interior_delta
    decrease, gaps = 0.0, []
    for lower, upper in zip(solutions, solutions[1:]):
        decrease = max(decrease, float(np.max((lower.values - upper.values) / (1.0 + ctx.poisson))))
        gaps.append(float(np.max((upper.values - lower.values)[interior])))
    monotone = all(np.all(upper.values >= lower.values - tolerance) for lower, upper in zip(solutions, solutions[1:]))
    if not monotone:
        LOGGER.warning("ladder is not monotone: largest relative decrease %.3e", decrease)
    return ModerateLadder(
        solutions=solutions,
        monotone=bool(monotone),
        max_decrease=decrease,
        cauchy_gaps=gaps,
        interior_delta=opts.interior_delta,
    )


# ---------------------------------------------------------------------------------------------
# Supersolution


def boundary_profile_U(nl: Nonlinearity, spec: BernsteinSpec) -> t.Callable[[np.ndarray], np.ndarray]:
    """δ ↦ ψ(Φ(δ)), the boundary blow-up profile."""
    proxy = renewal_proxy(spec)
    if nl.family is NonlinearityFamily.POWER:
        p = float(nl.p)
        const = (p - 1.0) / (2.0 * math.sqrt(p + 1.0))

        def profile(delta: np.ndarray) -> np.ndarray:
            return (const * np.asarray(proxy(delta))) ** (2.0 / (1.0 - p))

        return profile

    def generic(delta: np.ndarray) -> np.ndarray:
        s_values = np.atleast_1d(np.asarray(proxy(delta)))
        return np.array([ko_psi(nl, float(s)) for s in s_values]).reshape(np.shape(delta))

    return generic


@dataclass
class SupersolutionSpec:
    """ū = μ G^φ_D 1 + λ ψ(Φ(δ_D)) with its estimated constants and the sampled inequality check."""

    spec: BernsteinSpec
    nl: Nonlinearity
    grid: Grid
    C: float
    eta: float
    lam: float
    mu: float
    c_by_eta: dict[float, float]
    max_defect: float
    check_points: np.ndarray
    applied_U: np.ndarray
    check_values: np.ndarray
    residuals: np.ndarray
    values: np.ndarray
    profile: t.Callable[[np.ndarray], np.ndarray]

    @property
    def holds(self: t.Self) -> bool:
        return bool(np.all(self.residuals >= 0))

    def U(self: t.Self, points: np.ndarray) -> np.ndarray:
        return self.profile(np.asarray(boundary_distance(self.grid.domain, np.atleast_2d(points))))

    def evaluate(self: t.Self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return self.mu * green_of_one_many(self.spec, self.grid.domain, pts) + self.lam * self.U(pts)

    def blowup_factor(self: t.Self, inner: float = 0.02, outer: float = 0.1) -> float:
        """(ū/Pσ)(δ=inner) / (ū/Pσ)(δ=outer) on the x1 face-normal line."""
        points = np.array([face_normal_points(self.grid.domain, (depth,))[0].point for depth in (inner, outer)])
        ratio = self.evaluate(points) / poisson_sigma_many(self.spec, self.grid.domain, points)
        return float(ratio[0] / ratio[1])

    def summary(self: t.Self) -> dict[str, t.Any]:
        return {
            "C": self.C,
            "eta": self.eta,
            "lambda": self.lam,
            "mu": self.mu,
            "C_by_eta": {str(k): v for k, v in self.c_by_eta.items()},
            "max_defect": self.max_defect,
            "holds": self.holds,
            "check_points": self.check_points,
            "residuals": self.residuals,
        }


def _supersolution_points(domain: BoxDomain) -> tuple[np.ndarray, np.ndarray]:
    faces = [f"x{axis + 1}{sign}" for axis in range(domain.d) for sign in ("-", "+")]
    layer = []
    for k, delta in enumerate(LAYER_DELTAS):
        wanted = faces[k % len(faces)]
        layer.append(next(s.point for s in face_normal_points(domain, (delta,), (0.1,)) if s.face == wanted))
    interior_deltas = np.linspace(0.22, 0.4, 10) * min(domain.sides)
    interior = []
    for k, delta in enumerate(interior_deltas):
        wanted = faces[(k + 1) % len(faces)]
        interior.append(next(s.point for s in face_normal_points(domain, (float(delta),), (0.05,)) if s.face == wanted))
    return np.array(layer), np.array(interior)


def build_supersolution(
    nl: Nonlinearity, spec: BernsteinSpec, domain: BoxDomain, opts: SolverOptions | None = None
) -> SupersolutionSpec:
    """
    Assemble ū = μ G^φ_D 1 + λ U with U = ψ(Φ(δ_D)).

    C is the largest −φ(−Δ)U/f(U) over the boundary-layer sample (at least 1), η the widest
    tested shell on which that maximum has settled, λ = 2.1 C^{1/m}, and μ = λ sup |φ(−Δ)U|
    over the sample points outside the shell. φ(−Δ|_D)ū is taken as μ + λ φ(−Δ|_D)U, from
    φ(−Δ|_D) G^φ_D 1 = 1.

    Raises:
        ConditionError: KO2 or the boundary blow-up condition does not hold.
        ConstructionError: the estimate of C keeps growing as the shell shrinks.
    """
    opts = opts or SolverOptions()
    report = ko_checks(nl, spec)
    if report.ko2.verdict is not Verdict.HOLDS or report.boundary_blowup.verdict is not Verdict.HOLDS:
        raise ConditionError(f"supersolution needs KO2 and the blow-up condition: {', '.join(report.failures())}")
    m, _ = constants(nl)
    profile = boundary_profile_U(nl, spec)

    def U(points: np.ndarray) -> np.ndarray:
        return profile(np.asarray(boundary_distance(domain, points)))

    layer, interior = _supersolution_points(domain)
    points = np.concatenate([layer, interior])
    deltas = np.asarray(boundary_distance(domain, points))
    applied = np.array(
        parallel_map(lambda x: apply_pointwise(spec, domain, U, x, rule=opts.pointwise), list(points), opts.workers)
    )
    u_values = U(points)
    defect = -applied / np.asarray(nl.value(u_values))

    c_by_eta = {}
    for eta in SHELL_WIDTHS:
        inside = deltas[: len(layer)] < eta
        c_by_eta[eta] = max(1.0, float(defect[: len(layer)][inside].max())) if np.any(inside) else 1.0
    widths = sorted(SHELL_WIDTHS, reverse=True)
    if c_by_eta[widths[-1]] > 10.0 * c_by_eta[widths[-2]]:
        raise ConstructionError(
            "the supersolution constant C grows as the boundary shell shrinks",
            {"C_by_eta": {str(k): v for k, v in c_by_eta.items()}},
        )
    eta = widths[-1]
    for wide, narrow in zip(widths, widths[1:]):
        if c_by_eta[wide] <= 1.5 * c_by_eta[narrow]:
            eta = wide
            break
    C = max(c_by_eta[w] for w in widths if w <= eta)
    lam = (1.0 + SUPERSOLUTION_SAFETY) * C ** (1.0 / m)
    outside = deltas >= eta
    mu = lam * float(np.max(np.abs(applied[outside]))) if np.any(outside) else 0.0

    ctx = _context_for(spec, domain, opts)
    grid_values = mu * green_of_one_grid(spec, ctx.grid) + lam * profile(ctx.delta)
    check_values = mu * green_of_one_many(spec, domain, points) + lam * u_values
    residuals = mu + lam * applied + np.asarray(nl.value(check_values))
    max_defect = float(defect[: len(layer)].max())
    LOGGER.info(
        "supersolution C=%.4g (largest defect %.4g) eta=%.3g lambda=%.4g mu=%.4g", C, max_defect, eta, lam, mu
    )
    if max_defect < 1.0:
        LOGGER.warning("C is clamped to 1: the largest defect on the boundary layer is %.4g", max_defect)
    if np.any(residuals < 0):
        LOGGER.warning("supersolution inequality fails at %d of %d points", int(np.sum(residuals < 0)), residuals.size)
    return SupersolutionSpec(
        spec=spec,
        nl=nl,
        grid=ctx.grid,
        C=C,
        eta=eta,
        lam=lam,
        mu=mu,
        c_by_eta=c_by_eta,
        max_defect=max_defect,
        check_points=points,
        applied_U=applied,
        check_values=check_values,
        residuals=residuals,
        values=grid_values,
        profile=profile,
    )


class DominationReport(BaseModel):
    max_excess: float
    per_j: list[float]
    limit: float = DOMINATION_LIMIT

    @property
    def passed(self: t.Self) -> bool:
        return self.max_excess <= self.limit


def domination_check(ladder: ModerateLadder, supersolution: SupersolutionSpec) -> DominationReport:
    """max over the grid and j of (u_j − ū)/ū."""
    if ladder.grid != supersolution.grid:
        raise GridMismatchError("ladder and supersolution were built on different grids")
    per_j = [float(np.max((s.values - supersolution.values) / supersolution.values)) for s in ladder.solutions]
    report = DominationReport(max_excess=max(per_j), per_j=per_j)
    if not report.passed:
        LOGGER.warning("ladder is not dominated by the supersolution: excess %.4g", report.max_excess)
    return report


class LargeSolutionReport(BaseModel):
    J: int
    cauchy_gap: float | None
    residual_interior: float
    residual_scale: float
    residual_ok: bool
    blowup_delta: float
    blowup_min_ratio: list[float]
    blowup_nondecreasing: bool
    blowup_linear: bool
    minimal_below_supersolution: bool | None


def large_extrapolate(
    ladder: ModerateLadder,
    supersolution: SupersolutionSpec | None = None,
    blowup_delta: float = 0.05,
    offsets: t.Sequence[float] = (0.0, 0.1, -0.1, 0.2, -0.2),
) -> LargeSolutionReport:
    """
    Report u ≈ u_J: the last interior Cauchy gap, the interior residual, the blow-up table
    min over the δ-shell of u_j/Pσ for every j, and the probe u_J ≤ ū on K.
    """
    last = ladder.solutions[-1]
    samples = face_normal_points(last.domain, (blowup_delta,), offsets)
    points = np.array([s.point for s in samples])
    p_sigma = poisson_sigma_many(last.spec, last.domain, points)
    blowup = [float(np.min(s.evaluate(points, p_sigma) / p_sigma)) for s in ladder.solutions]
    nondecreasing = all(b >= a for a, b in zip(blowup, blowup[1:]))
    linear = all(value >= 0.5 * (k + 1) for k, value in enumerate(blowup))
    minimal = None
    if supersolution is not None:
        interior = last.grid.distance_tensor() >= ladder.interior_delta
        minimal = bool(np.all(last.values[interior] <= supersolution.values[interior]))
    return LargeSolutionReport(
        J=ladder.J,
        cauchy_gap=ladder.cauchy_gaps[-1] if ladder.cauchy_gaps else None,
        residual_interior=last.residual_interior,
        residual_scale=last.residual_scale,
        residual_ok=last.residual_ok,
        blowup_delta=blowup_delta,
        blowup_min_ratio=blowup,
        blowup_nondecreasing=nondecreasing,
        blowup_linear=linear,
        minimal_below_supersolution=minimal,
    )
