"""Free-space operator φ(−Δ) and pair-set Hölder norm estimates."""

from __future__ import annotations

import functools
import logging
import math
import typing as t

import numpy as np
from numpy.polynomial import legendre
from pydantic import BaseModel, ConfigDict
from scipy import integrate, special

from modules.bernstein import BernsteinSpec, Family, default_certificate, jump_kernel, jump_kernel_moment, phi_eval
from modules.domain import BoxDomain
from modules.errors import DomainError, NumericalError, TruncationError
from modules.operators import TimeRule, finite_difference_hessian, sphere_rule
from modules.semilinear import ModerateSolution, SolverOptions, solve_moderate
from modules.utils import parallel_map

LOGGER = logging.getLogger(__name__)

Field = t.Callable[[np.ndarray], np.ndarray]

DILATIONS = (1.0, 0.5, 0.25, 0.125)
SUITE_SPREAD_LIMIT = 10.0
FRACTIONAL_TOLERANCE = 0.01


class FreeSpaceRule(BaseModel):
    """Radii and node counts of the free-space operator quadrature."""

    model_config = ConfigDict(frozen=True)

    r_in: float = 0.05
    r_out: float = 50.0
    rtol: float = 1e-4
    sphere_order: int = 10
    inner_nodes: int = 16
    per_decade: int = 6
    order: int = 12


@functools.lru_cache(maxsize=256)
def _tail_mass(spec: BernsteinSpec, d: int, r_out: float) -> float:
    """|S^{d−1}| ∫_R^∞ r^{d−1} j(r) dr."""
    _, weights = sphere_rule(d, 2)
    return float(weights.sum()) * jump_kernel_moment(spec, d, r_out, math.inf, d - 1.0)


def apply_phi_rd(
    spec: BernsteinSpec,
    d: int,
    u: Field,
    x: t.Sequence[float],
    hessian: np.ndarray | None = None,
    rule: FreeSpaceRule | None = None,
) -> float:
    """
    φ(−Δ)u(x) = −P.V.∫_{R^d} (u(y) − u(x)) j(|y − x|) dy.

    The ball of radius r_in is integrated with the second-order Taylor term subtracted and
    added back in closed form, the shell r_in < r < r_out on log-spaced Gauss–Legendre panels.
    Beyond r_out u is taken as zero and the term u(x)·∫_{r>r_out} j is added analytically.

    Raises:
        DomainError: the identity spec, which has no jump part.
        TruncationError: u on the outer sphere is too large for the tail to be dropped.
    """
    if spec.family is Family.IDENTITY:
        raise DomainError("the identity spec is a local operator without a free-space jump representation")
    rule = rule or FreeSpaceRule()
    point = np.asarray(x, dtype=float).reshape(d)
    dirs, dir_weights = sphere_rule(d, rule.sphere_order)
    area = float(dir_weights.sum())
    ux = float(u(point[None, :])[0])
    hess = finite_difference_hessian(u, point, rule.r_in / 8.0) if hessian is None else np.asarray(hessian, dtype=float)

    z, w = legendre.leggauss(rule.inner_nodes)
    r_in = rule.r_in * (z + 1.0) / 2.0
    w_in = rule.r_in * w / 2.0
    values = u((point[None, None, :] + r_in[:, None, None] * dirs[None, :, :]).reshape(-1, d)).reshape(r_in.size, -1)
    quadratic = np.einsum("kd,de,ke->k", dirs, hess, dirs)
    compensated = values - ux - 0.5 * r_in[:, None] ** 2 * quadratic[None, :]
    radial = w_in * r_in ** (d - 1) * np.asarray(jump_kernel(spec, d, r_in, closed_form=True))
    inner = -float(radial @ (compensated @ dir_weights))
    inner -= np.trace(hess) / (2.0 * d) * area * jump_kernel_moment(spec, d, 0.0, rule.r_in, d + 1.0)

    panels = TimeRule.log_panels(rule.r_in, rule.r_out, per_decade=rule.per_decade, order=rule.order)
    r_shell = panels.nodes
    values = u((point[None, None, :] + r_shell[:, None, None] * dirs[None, :, :]).reshape(-1, d)).reshape(r_shell.size, -1)
    radial = panels.weights * r_shell ** (d - 1) * np.asarray(jump_kernel(spec, d, r_shell, closed_form=True))
    shell = -float(radial @ ((values - ux) @ dir_weights))

    tail_mass = _tail_mass(spec, d, rule.r_out)
    value = inner + shell + ux * tail_mass
    edge = float(np.max(np.abs(u(point[None, :] + rule.r_out * dirs))))
    neglected = edge * tail_mass
    if neglected > rule.rtol * abs(value) and neglected > 0.0:
        raise TruncationError(
            f"tail beyond r={rule.r_out:g} is not negligible at {point}",
            {"neglected": neglected, "value": value, "edge": edge},
        )
    return value


def gaussian_oracle(spec: BernsteinSpec, d: int) -> float:
    """
    φ(−Δ)e^{−|x|²} at the origin from the Fourier side:
    (2π)^{−d} π^{d/2} |S^{d−1}| ∫_0^∞ r^{d−1} φ(r²) e^{−r²/4} dr.
    """
    area = 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)
    value, abserr = integrate.quad(
        lambda r: r ** (d - 1) * float(phi_eval(spec, r * r)) * math.exp(-r * r / 4.0) if r > 0 else 0.0,
        0.0,
        math.inf,
        epsrel=1e-10,
        limit=200,
    )
    if not abserr <= 1e-8 * abs(value):
        raise NumericalError("Fourier oracle quadrature did not converge", {"abserr": abserr, "value": value})
    return (2.0 * math.pi) ** (-d) * math.pi ** (d / 2.0) * area * value


def gaussian(points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(points)
    return np.exp(-np.sum(pts * pts, axis=-1))


class FractionalCheck(BaseModel):
    d: int
    spec: str
    value: float
    oracle: float
    rel_error: float

    @property
    def passed(self: t.Self) -> bool:
        return self.rel_error < FRACTIONAL_TOLERANCE

    def rows(self: t.Self) -> list[list[t.Any]]:
        return [[self.spec, self.d, self.value, self.oracle, self.rel_error]]


def fractional_check(spec: BernsteinSpec, d: int = 3, rule: FreeSpaceRule | None = None) -> FractionalCheck:
    """apply_phi_rd of the Gaussian at the origin against its Fourier oracle."""
    hess = -2.0 * np.eye(d)
    value = apply_phi_rd(spec, d, gaussian, np.zeros(d), hessian=hess, rule=rule)
    oracle = gaussian_oracle(spec, d)
    check = FractionalCheck(d=d, spec=spec.label, value=value, oracle=oracle, rel_error=abs(value - oracle) / abs(oracle))
    LOGGER.info("fractional check %s in d=%d: %.8g vs %.8g", spec.label, d, value, oracle)
    return check


# ---------------------------------------------------------------------------------------------
# Hölder norms on pair sets


class PairSet(t.NamedTuple):
    first: np.ndarray
    second: np.ndarray

    @property
    def separations(self: t.Self) -> np.ndarray:
        return np.linalg.norm(self.first - self.second, axis=-1)

    def scaled(self: t.Self, factor: float) -> "PairSet":
        return PairSet(self.first * factor, self.second * factor)

    def extended(self: t.Self, other: "PairSet") -> "PairSet":
        return PairSet(np.vstack([self.first, other.first]), np.vstack([self.second, other.second]))


def _directions(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    raw = rng.standard_normal((n, d))
    return raw / np.linalg.norm(raw, axis=-1, keepdims=True)


def dyadic_pairs(
    d: int,
    rng: np.random.Generator,
    center: t.Sequence[float] | None = None,
    radius: float = 1.0,
    levels: int = 11,
    per_level: int = 3,
    top: float = 1.0,
) -> PairSet:
    """
    Pairs at separations top·2^{−l}, l < levels.

    Every level has one pair anchored at the center and `per_level` pairs whose first point is
    uniform in the ball of the given radius.
    """
    origin = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    first, second = [], []
    for level in range(levels):
        sep = top * 2.0**-level
        bases = origin + _directions(rng, per_level, d) * radius * rng.random((per_level, 1)) ** (1.0 / d)
        bases = np.vstack([origin, bases])
        first.append(bases)
        second.append(bases + sep * _directions(rng, bases.shape[0], d))
    return PairSet(np.vstack(first), np.vstack(second))


def interior_pairs(
    domain: BoxDomain, rng: np.random.Generator, delta: float = 0.25, levels: int = 9, per_level: int = 6
) -> PairSet:
    """Dyadic pairs with both points in K = {δ_D ≥ delta}, separations from the inradius of K down."""
    lo = np.full(domain.d, delta)
    hi = domain.lengths - delta
    if np.any(hi <= lo):
        raise DomainError(f"the set δ_D >= {delta} is empty in the box {domain.sides}")
    top = float(np.min(hi - lo)) / 2.0
    first, second = [], []
    for level in range(levels):
        sep = top * 2.0**-level
        bases = lo + sep + rng.random((per_level, domain.d)) * (hi - lo - 2.0 * sep)
        first.append(bases)
        second.append(bases + sep * _directions(rng, per_level, domain.d))
    return PairSet(np.vstack(first), np.vstack(second))


class HolderEstimate(BaseModel):
    """Σ_{j≤k} sup|D^j u| on the sampled points and [D^k u]_α from the pair set."""

    model_config = ConfigDict(frozen=True)

    order: int
    exponent: float
    sup_norm: float
    seminorm: float
    pairs: int

    @property
    def norm(self: t.Self) -> float:
        return self.sup_norm + self.seminorm


def _derivatives(u: Field, points: np.ndarray, k: int, h: float) -> list[np.ndarray]:
    """[u, ∇u, Hu][:k+1] at the points by central differences; trailing axes are flattened."""
    values = [np.asarray(u(points), dtype=float)]
    if k == 0:
        return values
    m, d = points.shape
    eye = np.eye(d) * h
    plus = np.stack([np.asarray(u(points + e), dtype=float) for e in eye], axis=-1)
    minus = np.stack([np.asarray(u(points - e), dtype=float) for e in eye], axis=-1)
    values.append((plus - minus) / (2.0 * h))
    if k == 1:
        return values
    hess = np.empty((m, d, d))
    for i in range(d):
        hess[:, i, i] = (plus[:, i] - 2.0 * values[0] + minus[:, i]) / (h * h)
        for j in range(i + 1, d):
            corners = [np.asarray(u(points + si * eye[i] + sj * eye[j]), dtype=float) for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
            hess[:, i, j] = hess[:, j, i] = (corners[0] - corners[1] - corners[2] + corners[3]) / (4.0 * h * h)
    values.append(hess.reshape(m, -1))
    return values


def holder_seminorm(u: Field, pairs: PairSet, k: int, alpha: float, step: float | None = None) -> HolderEstimate:
    """
    Estimate of ‖u‖_{C^{k,α}} from a pair set: sup parts over all pair points plus
    max |D^k u(x) − D^k u(y)| / |x − y|^α over the pairs.

    Derivatives are central differences with a step well below the smallest separation.
    """
    if k not in (0, 1, 2):
        raise DomainError(f"derivative order must be 0, 1 or 2, got {k}")
    if not 0 < alpha <= 1:
        raise DomainError(f"Hölder exponent must lie in (0, 1], got {alpha}")
    seps = pairs.separations
    if np.any(seps <= 0):
        raise DomainError("pair set contains coincident points")
    h = step if step is not None else 0.05 * float(seps.min())
    n = seps.size
    derivs = _derivatives(u, np.vstack([pairs.first, pairs.second]), k, h)
    sup_norm = sum(float(np.max(np.abs(dj.reshape(2 * n, -1)))) if dj.size else 0.0 for dj in derivs)
    top = derivs[-1].reshape(2 * n, -1)
    gaps = np.linalg.norm(top[:n] - top[n:], axis=-1)
    seminorm = float(np.max(gaps / seps**alpha))
    return HolderEstimate(order=k, exponent=alpha, sup_norm=sup_norm, seminorm=seminorm, pairs=n)


# ---------------------------------------------------------------------------------------------
# Dilation ratio suites


class Suite(t.NamedTuple):
    name: str
    k: int

    def hypothesis(self: t.Self, alpha: float, two_delta2: float) -> str:
        """Empty when the suite's range condition holds, otherwise the reason to skip."""
        match self.name:
            case "reg0":
                ok = alpha > two_delta2
                condition = f"alpha={alpha:g} > 2*delta2={two_delta2:.4g}"
            case "reg1":
                ok = 1.0 + alpha > two_delta2 > alpha
                condition = f"1+alpha={1 + alpha:g} > 2*delta2={two_delta2:.4g} > alpha={alpha:g}"
            case _:
                ok = 1.0 + alpha < two_delta2
                condition = f"1+alpha={1 + alpha:g} < 2*delta2={two_delta2:.4g}"
        return "" if ok else f"hypothesis violated: {condition}"

    def output_exponent(self: t.Self, alpha: float, two_delta2: float) -> float:
        return self.k + alpha - two_delta2


SUITES = {"reg0": Suite("reg0", 0), "reg1": Suite("reg1", 1), "reg2": Suite("reg2", 2)}


class ProbeFunction(t.NamedTuple):
    name: str
    u: Field


def smooth_bump(center: t.Sequence[float] | None = None, radius: float = 1.0, amplitude: float = 1.0) -> Field:
    """amplitude·exp(1 − 1/(1 − |x − c|²/r²)) inside the ball, 0 outside."""

    def bump(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        shift = pts if center is None else pts - np.asarray(center, dtype=float)
        rho2 = np.sum(shift * shift, axis=-1) / radius**2
        inside = rho2 < 1.0
        out = np.zeros(pts.shape[0])
        out[inside] = amplitude * np.exp(1.0 - 1.0 / (1.0 - rho2[inside]))
        return out

    return bump


def default_family(d: int) -> list[ProbeFunction]:
    tilt = np.zeros(d)
    tilt[0] = 0.3
    return [
        ProbeFunction("bump", smooth_bump()),
        ProbeFunction("shifted_bump", smooth_bump(center=tilt, radius=0.6, amplitude=2.0)),
        ProbeFunction("zero", lambda points: np.zeros(np.atleast_2d(points).shape[0])),
    ]


def dilated(u: Field, scale: float) -> Field:
    def scaled(points: np.ndarray) -> np.ndarray:
        return u(np.atleast_2d(points) / scale)

    return scaled


class SuiteRow(BaseModel):
    member: str
    scale: float
    input_norm: float
    output_norm: float
    ratio: float


class RatioSuiteReport(BaseModel):
    suite: str
    spec: str
    alpha: float
    two_delta2: float
    skipped: bool = False
    reason: str = ""
    rows: list[SuiteRow] = []
    spreads: dict[str, float] = {}

    @property
    def passed(self: t.Self) -> bool:
        return not self.skipped and all(spread < SUITE_SPREAD_LIMIT for spread in self.spreads.values())

    def csv_rows(self: t.Self) -> list[list[t.Any]]:
        return [[self.suite, row.member, row.scale, row.input_norm, row.output_norm, row.ratio] for row in self.rows]


def _suite_row(
    spec: BernsteinSpec,
    d: int,
    suite: Suite,
    alpha: float,
    beta: float,
    member: ProbeFunction,
    scale: float,
    pairs: PairSet,
    rule: FreeSpaceRule,
) -> SuiteRow:
    u_s = dilated(member.u, scale)
    scaled_pairs = pairs.scaled(scale)
    local_rule = rule.model_copy(update={"r_in": rule.r_in * scale})

    def operator(points: np.ndarray) -> np.ndarray:
        return np.array([apply_phi_rd(spec, d, u_s, p, rule=local_rule) for p in np.atleast_2d(points)])

    source = holder_seminorm(u_s, scaled_pairs, suite.k, alpha)
    image = holder_seminorm(operator, scaled_pairs, 0, beta)
    ratio = image.norm / source.norm if source.norm > 0 else 0.0
    LOGGER.debug("%s %s scale %g: %.6g / %.6g", suite.name, member.name, scale, image.norm, source.norm)
    return SuiteRow(member=member.name, scale=scale, input_norm=source.norm, output_norm=image.norm, ratio=ratio)


def lemma_ratio_suite(
    spec: BernsteinSpec,
    suite: str = "reg0",
    alpha: float = 0.8,
    d: int = 1,
    family: t.Sequence[ProbeFunction] | None = None,
    scales: t.Sequence[float] = DILATIONS,
    seed: int = 0,
    workers: int = 1,
    rule: FreeSpaceRule | None = None,
) -> RatioSuiteReport:
    """
    Ratios ‖φ(−Δ)u_s‖_{C^{0, k+α−2δ2}} / ‖u_s‖_{C^{k,α}} for dilations u_s(x) = u(x/s).

    Pair sets are matched across scales: the pairs of scale s are the unit pairs times s. A
    member passes when max/min of its positive ratios stays below 10; a member whose ratios
    are all zero passes trivially.
    """
    if suite not in SUITES:
        raise DomainError(f"unknown suite {suite!r}, expected one of {sorted(SUITES)}")
    chosen = SUITES[suite]
    two_delta2 = 2.0 * default_certificate(spec).delta2
    report = RatioSuiteReport(suite=suite, spec=spec.label, alpha=alpha, two_delta2=two_delta2)
    reason = chosen.hypothesis(alpha, two_delta2)
    if reason:
        LOGGER.warning("skipping %s for %s: %s", suite, spec.label, reason)
        return report.model_copy(update={"skipped": True, "reason": reason})

    beta = chosen.output_exponent(alpha, two_delta2)
    members = list(family) if family is not None else default_family(d)
    pairs = dyadic_pairs(d, np.random.default_rng(seed), radius=0.9)
    rule = rule or FreeSpaceRule()
    jobs = [(member, scale) for member in members for scale in scales]
    rows = parallel_map(
        lambda job: _suite_row(spec, d, chosen, alpha, beta, job[0], job[1], pairs, rule), jobs, workers
    )
    spreads = {}
    for member in members:
        ratios = [row.ratio for row in rows if row.member == member.name]
        positive = [r for r in ratios if r > 0]
        spreads[member.name] = max(positive) / min(positive) if positive else 1.0
    report = report.model_copy(update={"rows": rows, "spreads": spreads})
    log = LOGGER.info if report.passed else LOGGER.error
    log("%s suite for %s: spreads %s", suite, spec.label, spreads)
    return report


# ---------------------------------------------------------------------------------------------
# Interior regularity of the moderate solution


class InteriorHolderReport(BaseModel):
    delta: float
    order: int
    exponent: float
    coarse_nodes: int
    fine_nodes: int
    coarse: HolderEstimate
    fine: HolderEstimate
    relative_gap: float
    tolerance: float

    @property
    def finite(self: t.Self) -> bool:
        return all(math.isfinite(v) for v in (self.coarse.norm, self.fine.norm))

    @property
    def stable(self: t.Self) -> bool:
        return self.finite and self.relative_gap <= self.tolerance

    def rows(self: t.Self) -> list[list[t.Any]]:
        return [
            [nodes, est.order, est.exponent, est.sup_norm, est.seminorm]
            for nodes, est in ((self.coarse_nodes, self.coarse), (self.fine_nodes, self.fine))
        ]


def interior_holder_check(
    solution: ModerateSolution,
    opts: SolverOptions | None = None,
    delta: float = 0.25,
    seed: int = 0,
    tolerance: float = 0.25,
) -> InteriorHolderReport:
    """
    C^{k,β} pair-set estimates of u_j on {δ_D ≥ delta} with k + β = 0.9·2δ1, for the given
    solution and for a re-solve on a grid with twice the nodes.
    """
    opts = opts or SolverOptions()
    spec, domain = solution.spec, solution.domain
    smoothness = 0.9 * 2.0 * default_certificate(spec).delta1
    order = min(2, math.floor(smoothness))
    exponent = smoothness - order
    if exponent <= 0:
        order, exponent = order - 1, 1.0
    fine_opts = opts.model_copy(
        update={
            "cutoff": solution.basis.cutoff,
            "nodes_per_half": 2 * solution.grid.nodes_per_half,
            "grading": solution.grid.grading,
            "residuals": False,
        }
    )
    fine = solve_moderate(solution.j, solution.nl, spec, domain, fine_opts)
    pairs = interior_pairs(domain, np.random.default_rng(seed), delta=delta)

    def estimate(sol: ModerateSolution) -> HolderEstimate:
        return holder_seminorm(sol.evaluate, pairs, order, exponent)

    coarse_est, fine_est = estimate(solution), estimate(fine)
    gap = abs(fine_est.norm - coarse_est.norm) / max(fine_est.norm, coarse_est.norm, 1e-300)
    report = InteriorHolderReport(
        delta=delta,
        order=order,
        exponent=exponent,
        coarse_nodes=solution.grid.nodes_per_half,
        fine_nodes=fine.grid.nodes_per_half,
        coarse=coarse_est,
        fine=fine_est,
        relative_gap=gap,
        tolerance=tolerance,
    )
    LOGGER.info("interior C^{%d,%.3g} estimate of u_%d: gap %.3g under refinement", order, exponent, solution.j, gap)
    return report
