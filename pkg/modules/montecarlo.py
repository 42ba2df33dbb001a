"""Path simulation of the subordinate killed Brownian motion X_t = W^D_{S_t}."""

from __future__ import annotations

import logging
import math
import typing as t

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from modules.bernstein import BernsteinSpec, Family, levy_tail, potential_density
from modules.domain import BoxDomain, boundary_distance
from modules.errors import DomainError, HorizonError
from modules.operators import green_of_one, killing_kappa, poisson_sigma, survival
from modules.utils import parallel_map

LOGGER = logging.getLogger(__name__)

ALIVE_LIMIT = 1e-3
_U_EDGE = 1e-12

PathFunction = t.Callable[[np.ndarray], np.ndarray | float]


class PathConfig(BaseModel):
    """
    Simulation settings.

    Paths are split into chunks of `chunk_size`; chunk c draws from the stream
    SeedSequence(entropy=seed, spawn_key=(c,)), so results do not depend on `workers`.
    """

    model_config = ConfigDict(frozen=True)

    dt: float = 1e-4
    horizon: float = 4.0
    paths: int = 10_000
    seed: int = 0
    chunk_size: int = 2500
    workers: int = 1
    bridge: bool = True

    @model_validator(mode="after")
    def _check(self: t.Self) -> t.Self:
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.horizon >= self.dt:
            raise ValueError(f"horizon {self.horizon} is shorter than one step {self.dt}")
        if self.paths < 1 or self.chunk_size < 1:
            raise ValueError("paths and chunk_size must be at least 1")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        return self

    @property
    def steps(self: t.Self) -> int:
        return max(1, math.ceil(self.horizon / self.dt - 1e-9))

    def chunks(self: t.Self) -> list[tuple[int, int]]:
        """(stream id, path count) for every chunk."""
        full, rest = divmod(self.paths, self.chunk_size)
        sizes = [self.chunk_size] * full + ([rest] if rest else [])
        return list(enumerate(sizes))

    def generator(self: t.Self, stream: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(stream,)))


class OccupationEstimate(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean: float
    stderr: float
    paths: int
    killed_fraction: float

    @classmethod
    def from_samples(cls: type[t.Self], samples: np.ndarray, killed_fraction: float) -> t.Self:
        values = np.asarray(samples, dtype=float)
        n = values.size
        stderr = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(
            mean=float(values.mean()),
            stderr=stderr,
            paths=n,
            killed_fraction=float(min(1.0, max(0.0, killed_fraction))),
        )

    def z_score(self: t.Self, oracle: float) -> float:
        gap = abs(self.mean - oracle)
        if self.stderr == 0.0:
            return 0.0 if gap == 0.0 else math.inf
        return gap / self.stderr

    def within(self: t.Self, oracle: float, sigmas: float = 3.0) -> bool:
        return self.z_score(oracle) <= sigmas


class KilledPath(t.NamedTuple):
    times: np.ndarray
    positions: np.ndarray
    tau: float


def _interior_point(domain: BoxDomain, x: t.Sequence[float]) -> np.ndarray:
    point = np.asarray(x, dtype=float)
    if boundary_distance(domain, point) <= 0.0:
        raise DomainError(f"paths must start inside the box, got {point}")
    return point


def _check_sampleable(spec: BernsteinSpec) -> None:
    if spec.family not in (Family.STABLE, Family.IDENTITY):
        raise DomainError(f"exact increment sampling is only available for stable subordinators, got {spec.label}")


# ---------------------------------------------------------------------------------------------
# Subordinator


def sample_stable_subordinator(
    alpha: float, dt: float, steps: int | tuple[int, ...], rng: np.random.Generator
) -> np.ndarray:
    """
    Increments of the α/2-stable subordinator over steps of length dt, E[e^{−λΔS}] = e^{−dt·λ^{α/2}}.

    Kanter's representation: with U uniform on (0, π) and E standard exponential,
    (A(U)/E)^{(1−β)/β} is one-sided β-stable, where
    A(u) = (sin βu / sin u)^{1/(1−β)} · sin((1−β)u) / sin βu.
    """
    if not 0 < alpha < 2:
        raise DomainError(f"alpha must lie in (0, 2), got {alpha}")
    beta = alpha / 2.0
    u = np.clip(math.pi * rng.random(steps), _U_EDGE, math.pi - _U_EDGE)
    e = rng.standard_exponential(steps)
    log_a = (
        (np.log(np.sin(beta * u)) - np.log(np.sin(u))) / (1.0 - beta)
        + np.log(np.sin((1.0 - beta) * u))
        - np.log(np.sin(beta * u))
    )
    return dt ** (1.0 / beta) * np.exp((1.0 - beta) / beta * (log_a - np.log(e)))


def _subordinator_increments(spec: BernsteinSpec, dt: float, size: int, rng: np.random.Generator) -> np.ndarray:
    if spec.family is Family.IDENTITY:
        return np.full(size, dt)
    return sample_stable_subordinator(float(spec.alpha), dt, size, rng)


# ---------------------------------------------------------------------------------------------
# Killed Brownian motion


def _bridge_stays(
    domain: BoxDomain, before: np.ndarray, after: np.ndarray, duration: np.ndarray, uniforms: np.ndarray
) -> np.ndarray:
    """
    Sample whether the Brownian bridge between two interior positions stays inside every face.

    For the generator Δ a bridge of duration s from distance a to distance b of a face crosses it
    with probability e^{−ab/s}; faces are treated as independent.
    """
    lengths = domain.lengths
    s = np.asarray(duration, dtype=float).reshape(-1, 1)
    lower = np.exp(-before * after / s)
    upper = np.exp(-(lengths - before) * (lengths - after) / s)
    stay = np.prod((1.0 - lower) * (1.0 - upper), axis=1)
    return uniforms < stay


def _advance(
    domain: BoxDomain, pos: np.ndarray, duration: np.ndarray, rng: np.random.Generator, bridge: bool
) -> tuple[np.ndarray, np.ndarray]:
    """One Gaussian step of variance 2·duration per coordinate; returns new positions and the alive mask."""
    noise = rng.standard_normal(pos.shape) * np.sqrt(2.0 * duration)[:, None]
    moved = pos + noise
    inside = np.all((moved > 0.0) & (moved < domain.lengths), axis=1)
    if bridge:
        uniforms = rng.random(pos.shape[0])
        idx = np.flatnonzero(inside)
        inside[idx] = _bridge_stays(domain, pos[idx], moved[idx], duration[idx], uniforms[idx])
    return moved, inside


def sample_killed_path(
    domain: BoxDomain,
    x: t.Sequence[float],
    dt: float,
    horizon: float,
    rng: np.random.Generator,
    bridge: bool = True,
) -> KilledPath:
    """
    One path of W^D on the dt-grid up to the horizon.

    Positions are returned up to the last grid time before the kill. A kill during step k
    is recorded as τ_D = (k − 1/2)dt; τ_D is infinite when the path survives the horizon.
    """
    point = _interior_point(domain, x)
    steps = max(1, math.ceil(horizon / dt - 1e-9))
    increments = rng.standard_normal((steps, domain.d)) * math.sqrt(2.0 * dt)
    positions = np.vstack([point, point + np.cumsum(increments, axis=0)])
    inside = np.all((positions[1:] > 0.0) & (positions[1:] < domain.lengths), axis=1)
    if bridge:
        uniforms = rng.random(steps)
        # a step only needs the bridge test while both of its endpoints are inside
        both = inside & np.concatenate([[True], inside[:-1]])
        idx = np.flatnonzero(both)
        inside[idx] = _bridge_stays(domain, positions[idx], positions[idx + 1], np.full(idx.size, dt), uniforms[idx])
    dead = np.flatnonzero(~inside)
    if dead.size == 0:
        return KilledPath(times=dt * np.arange(steps + 1), positions=positions, tau=math.inf)
    k = int(dead[0]) + 1
    return KilledPath(times=dt * np.arange(k), positions=positions[:k], tau=(k - 0.5) * dt)


def _kill_steps(domain: BoxDomain, point: np.ndarray, dt: float, steps: int, n: int, rng: np.random.Generator, bridge: bool) -> np.ndarray:
    """Step index (1-based) at which each of n paths is killed, 0 for paths alive after `steps` steps."""
    pos = np.repeat(point[None, :], n, axis=0)
    alive = np.arange(n)
    killed_at = np.zeros(n, dtype=int)
    for k in range(1, steps + 1):
        if not alive.size:
            break
        pos, inside = _advance(domain, pos, np.full(alive.size, dt), rng, bridge)
        killed_at[alive[~inside]] = k
        pos, alive = pos[inside], alive[inside]
    return killed_at


def _kill_steps_all(domain: BoxDomain, point: np.ndarray, steps: int, config: PathConfig) -> np.ndarray:
    def run(chunk: tuple[int, int]) -> np.ndarray:
        stream, n = chunk
        return _kill_steps(domain, point, config.dt, steps, n, config.generator(stream), config.bridge)

    return np.concatenate(parallel_map(run, config.chunks(), config.workers))


def estimate_survival(domain: BoxDomain, x: t.Sequence[float], t_val: float, config: PathConfig) -> OccupationEstimate:
    """Fraction of killed Brownian paths alive at time t."""
    point = _interior_point(domain, x)
    steps = max(1, round(t_val / config.dt))
    killed_at = _kill_steps_all(domain, point, steps, config)
    alive = (killed_at == 0).astype(float)
    estimate = OccupationEstimate.from_samples(alive, killed_fraction=1.0 - alive.mean())
    LOGGER.debug("survival at t=%g from %s: %.6g +- %.2g", t_val, point, estimate.mean, estimate.stderr)
    return estimate


def sample_exit_times(domain: BoxDomain, x: t.Sequence[float], config: PathConfig) -> np.ndarray:
    """
    Exit times τ_D of config.paths killed paths.

    Raises:
        HorizonError: more than a fraction 1e-3 of the paths survives the horizon.
    """
    point = _interior_point(domain, x)
    killed_at = _kill_steps_all(domain, point, config.steps, config)
    alive_fraction = float(np.mean(killed_at == 0))
    if alive_fraction > ALIVE_LIMIT:
        raise HorizonError(
            f"{alive_fraction:.3g} of the paths are alive at the horizon {config.horizon}",
            {"alive_fraction": alive_fraction, "horizon": config.horizon},
        )
    # the few survivors are cut at the horizon
    return np.where(killed_at > 0, (killed_at - 0.5) * config.dt, config.horizon)


def estimate_exit_functional(
    domain: BoxDomain, x: t.Sequence[float], g: t.Callable[[np.ndarray], np.ndarray], config: PathConfig
) -> OccupationEstimate:
    """E_x[g(τ_D)] for a vectorized g."""
    taus = sample_exit_times(domain, x, config)
    return OccupationEstimate.from_samples(np.asarray(g(taus), dtype=float), killed_fraction=1.0)


def exit_functionals(
    spec: BernsteinSpec, domain: BoxDomain, x: t.Sequence[float], config: PathConfig
) -> dict[str, OccupationEstimate]:
    """
    Killing function, Poisson potential and mean exit time from one set of exit times.

    κ(x) = E_x[μ̄(τ_D)] and Pσ(x) = E_x[𝔲(τ_D)], since B(·, x) is the density of τ_D.
    """
    taus = sample_exit_times(domain, x, config)

    def estimate(values: t.Any) -> OccupationEstimate:
        return OccupationEstimate.from_samples(np.asarray(values, dtype=float), killed_fraction=1.0)

    return {
        "kappa": estimate(levy_tail(spec, taus)),
        "poisson_sigma": estimate(potential_density(spec, taus)),
        "exit_time": estimate(taus),
    }


# ---------------------------------------------------------------------------------------------
# Subordinate process


def _occupation_chunk(
    spec: BernsteinSpec, domain: BoxDomain, point: np.ndarray, f: PathFunction, config: PathConfig, stream: int, n: int
) -> tuple[np.ndarray, int]:
    rng = config.generator(stream)
    pos = np.repeat(point[None, :], n, axis=0)
    alive = np.arange(n)
    totals = np.zeros(n)
    for _ in range(config.steps):
        if not alive.size:
            break
        totals[alive] += np.broadcast_to(np.asarray(f(pos), dtype=float), (alive.size,)) * config.dt
        jumps = _subordinator_increments(spec, config.dt, alive.size, rng)
        pos, inside = _advance(domain, pos, jumps, rng, config.bridge)
        pos, alive = pos[inside], alive[inside]
    return totals, int(alive.size)


def estimate_green_potential(
    spec: BernsteinSpec, domain: BoxDomain, x: t.Sequence[float], f: PathFunction, config: PathConfig
) -> OccupationEstimate:
    """
    E_x[∫_0^∞ f(X_t) dt] = G^φ_D f(x), by a left-point sum over the dt-grid of the subordinator.

    Between grid times the killed Brownian motion runs for the subordinator increment ΔS, so it
    is sampled at the times S_t directly, with the bridge test over each increment.

    Raises:
        DomainError: x outside the box or a subordinator without exact increments.
        HorizonError: more than a fraction 1e-3 of the paths is alive at the horizon.
    """
    _check_sampleable(spec)
    point = _interior_point(domain, x)

    def run(chunk: tuple[int, int]) -> tuple[np.ndarray, int]:
        return _occupation_chunk(spec, domain, point, f, config, *chunk)

    results = parallel_map(run, config.chunks(), config.workers)
    totals = np.concatenate([totals for totals, _ in results])
    alive_fraction = sum(alive for _, alive in results) / config.paths
    if alive_fraction > ALIVE_LIMIT:
        raise HorizonError(
            f"{alive_fraction:.3g} of the subordinate paths are alive at the horizon {config.horizon}",
            {"alive_fraction": alive_fraction, "horizon": config.horizon},
        )
    estimate = OccupationEstimate.from_samples(totals, killed_fraction=1.0 - alive_fraction)
    LOGGER.info(
        "green potential at %s over %d paths: %.6g +- %.2g", point, config.paths, estimate.mean, estimate.stderr
    )
    return estimate


# ---------------------------------------------------------------------------------------------
# Validation against the deterministic backend


class ValidationEntry(BaseModel):
    name: str
    estimate: OccupationEstimate
    oracle: float
    z_score: float
    halved: OccupationEstimate | None = None
    shift_sigmas: float | None = None
    gated: bool = True
    passed: bool

    @classmethod
    def compare(
        cls: type[t.Self],
        name: str,
        estimate: OccupationEstimate,
        oracle: float,
        halved: OccupationEstimate | None = None,
        sigmas: float = 3.0,
        gated: bool = True,
    ) -> t.Self:
        passed = estimate.within(oracle, sigmas)
        shift = None
        if halved is not None:
            spread = math.hypot(estimate.stderr, halved.stderr)
            gap = abs(estimate.mean - halved.mean)
            shift = gap / spread if spread > 0 else (0.0 if gap == 0 else math.inf)
            passed = passed and shift <= 1.0
        return cls(
            name=name,
            estimate=estimate,
            oracle=oracle,
            z_score=estimate.z_score(oracle),
            halved=halved,
            shift_sigmas=shift,
            gated=gated,
            passed=passed,
        )


class ValidationReport(BaseModel):
    point: list[float]
    config: PathConfig
    entries: list[ValidationEntry]

    @property
    def passed(self: t.Self) -> bool:
        return all(entry.passed for entry in self.entries if entry.gated)

    def entry(self: t.Self, name: str) -> ValidationEntry:
        return next(entry for entry in self.entries if entry.name == name)


def validate(
    spec: BernsteinSpec,
    domain: BoxDomain,
    x: t.Sequence[float],
    config: PathConfig,
    survival_time: float = 0.1,
    sigmas: float = 3.0,
    functionals: bool = True,
) -> ValidationReport:
    """
    Cross-check the Green potential of 1 and the survival probability against the kernel backend.

    Both gated entries are repeated with dt/2; a shift of more than one combined standard error
    fails the entry. κ and Pσ from exit times are reported ungated.
    """
    point = _interior_point(domain, x)
    halved = config.model_copy(update={"dt": config.dt / 2.0})

    def ones(pos: np.ndarray) -> np.ndarray:
        return np.ones(pos.shape[0])

    entries = [
        ValidationEntry.compare(
            "green",
            estimate_green_potential(spec, domain, point, ones, config),
            green_of_one(spec, domain, point),
            halved=estimate_green_potential(spec, domain, point, ones, halved),
            sigmas=sigmas,
        ),
        ValidationEntry.compare(
            "survival",
            estimate_survival(domain, point, survival_time, config),
            float(survival(domain, survival_time, point)),
            halved=estimate_survival(domain, point, survival_time, halved),
            sigmas=sigmas,
        ),
    ]
    if functionals and spec.family is not Family.IDENTITY:
        estimates = exit_functionals(spec, domain, point, config)
        entries.append(
            ValidationEntry.compare("kappa", estimates["kappa"], killing_kappa(spec, domain, point), sigmas=sigmas, gated=False)
        )
        entries.append(
            ValidationEntry.compare(
                "poisson_sigma", estimates["poisson_sigma"], poisson_sigma(spec, domain, point), sigmas=sigmas, gated=False
            )
        )
    for entry in entries:
        log = LOGGER.info if entry.passed or not entry.gated else LOGGER.error
        log("mc %s: estimate %.6g, oracle %.6g, z=%.2f", entry.name, entry.estimate.mean, entry.oracle, entry.z_score)
    return ValidationReport(point=point.tolist(), config=config, entries=entries)
