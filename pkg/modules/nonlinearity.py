"""The reaction term f, its transforms F, ϕ, ψ and the Keller-Osserman type conditions."""

from __future__ import annotations

import functools
import json
import logging
import math
import typing as t
from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import integrate, optimize

from modules.bernstein import BernsteinSpec, default_certificate, phi_eval, phi_inverse
from modules.errors import ConditionError, DomainError, InvalidNonlinearityError, RangeError
from modules.utils import RatioTable, log_grid

LOGGER = logging.getLogger(__name__)

DYADIC_EPS = 0.05
DYADIC_LAG = 4
DYADIC_BLOCKS = 24
KO2_POWERS = 16
_LOG_T_LIMIT = 700.0


class NonlinearityFamily(str, Enum):
    POWER = "power"
    POWER_LOG = "power_log"
    CUSTOM = "custom"
    # f ≡ 0, the linear control case
    ZERO = "zero"


class Nonlinearity(BaseModel):
    """
    Reaction term f on [0, ∞).

    `power` is t^p, `power_log` is t^p·log(1+t)^q, `custom` takes f and f′ callables.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    family: NonlinearityFamily
    p: float | None = None
    q: float | None = None
    f: t.Callable[[float], float] | None = None
    df: t.Callable[[float], float] | None = None
    label: str = ""

    @model_validator(mode="after")
    def _check_parameters(self: t.Self) -> t.Self:
        match self.family:
            case NonlinearityFamily.POWER:
                if self.p is None or self.p <= 1:
                    raise ValueError(f"power nonlinearity needs p > 1, got {self.p}")
            case NonlinearityFamily.POWER_LOG:
                if self.p is None or self.q is None or self.p <= 1 or self.q < 0:
                    raise ValueError("power_log nonlinearity needs p > 1 and q >= 0")
            case NonlinearityFamily.CUSTOM:
                if not callable(self.f) or not callable(self.df):
                    raise ValueError("custom nonlinearity needs f and df callables")
        return self

    @classmethod
    def power(cls: type[t.Self], p: float) -> t.Self:
        return cls(family=NonlinearityFamily.POWER, p=p, label=f"t^{p:g}")

    @classmethod
    def power_log(cls: type[t.Self], p: float, q: float) -> t.Self:
        return cls(family=NonlinearityFamily.POWER_LOG, p=p, q=q, label=f"t^{p:g}log(1+t)^{q:g}")

    @classmethod
    def custom(
        cls: type[t.Self], f: t.Callable[[float], float], df: t.Callable[[float], float], label: str = "custom"
    ) -> t.Self:
        return cls(family=NonlinearityFamily.CUSTOM, f=f, df=df, label=label)

    @classmethod
    def zero(cls: type[t.Self]) -> t.Self:
        return cls(family=NonlinearityFamily.ZERO, label="zero")

    @property
    def analytic_constants(self: t.Self) -> tuple[float, float] | None:
        """(m, M) of the F-condition when known in closed form."""
        if self.family is NonlinearityFamily.POWER:
            return float(self.p) - 1.0, float(self.p) - 1.0
        if self.family is NonlinearityFamily.POWER_LOG:
            return float(self.p) - 1.0, float(self.p) - 1.0 + float(self.q)
        return None

    def value(self: t.Self, x: float | np.ndarray) -> float | np.ndarray:
        arr = np.asarray(x, dtype=float)
        if np.any(arr < 0):
            raise InvalidNonlinearityError("f is only defined on [0, inf)")
        match self.family:
            case NonlinearityFamily.POWER:
                out = arr ** float(self.p)
            case NonlinearityFamily.POWER_LOG:
                out = arr ** float(self.p) * np.log1p(arr) ** float(self.q)
            case NonlinearityFamily.ZERO:
                out = np.zeros_like(arr)
            case _:
                fn = t.cast(t.Callable[[float], float], self.f)
                out = np.array([fn(float(v)) for v in arr.ravel()]).reshape(arr.shape)
        return float(out) if np.ndim(x) == 0 else out

    __call__ = value

    def derivative(self: t.Self, x: float | np.ndarray) -> float | np.ndarray:
        arr = np.asarray(x, dtype=float)
        if np.any(arr < 0):
            raise InvalidNonlinearityError("f is only defined on [0, inf)")
        match self.family:
            case NonlinearityFamily.POWER:
                p = float(self.p)
                out = p * arr ** (p - 1.0)
            case NonlinearityFamily.POWER_LOG:
                p, q = float(self.p), float(self.q)
                log_term = np.log1p(arr)
                out = p * arr ** (p - 1.0) * log_term**q + q * arr**p * log_term ** (q - 1.0) / (1.0 + arr)
            case NonlinearityFamily.ZERO:
                out = np.zeros_like(arr)
            case _:
                fn = t.cast(t.Callable[[float], float], self.df)
                out = np.array([fn(float(v)) for v in arr.ravel()]).reshape(arr.shape)
        return float(out) if np.ndim(x) == 0 else out


def nonlinearity_to_dict(nl: Nonlinearity) -> dict[str, t.Any]:
    if nl.family is NonlinearityFamily.CUSTOM:
        raise DomainError("custom nonlinearities hold callables and cannot be serialized")
    parameters = {key: getattr(nl, key) for key in ("p", "q") if getattr(nl, key) is not None}
    return {"family": nl.family.value, "parameters": parameters, "label": nl.label}


def nonlinearity_from_dict(payload: dict[str, t.Any]) -> Nonlinearity:
    family = NonlinearityFamily(payload["family"])
    if family is NonlinearityFamily.CUSTOM:
        raise DomainError("custom nonlinearities must be constructed in code")
    return Nonlinearity(family=family, label=payload.get("label", family.value), **payload.get("parameters", {}))


def load_nonlinearity(path: str | Path) -> Nonlinearity:
    with open(path, "r") as handle:
        return nonlinearity_from_dict(json.load(handle))


class FConstants(BaseModel):
    m: float
    M: float
    holds: bool
    reason: str = ""


def check_F(nl: Nonlinearity, t_grid: t.Sequence[float] | None = None) -> FConstants:
    """
    Estimate m and M with (1+m)f ≤ tf′ ≤ (1+M)f on a sampled grid.

    Raises:
        InvalidNonlinearityError: f(t) ≤ 0 at a sampled t > 0.
    """
    ts = np.asarray(t_grid if t_grid is not None else log_grid(1e-8, 1e10, 181), dtype=float)
    if np.any(ts <= 0):
        raise DomainError("check_F grid must be positive")
    values = np.asarray(nl.value(ts))
    if np.any(~(values > 0)):
        bad = float(ts[np.argmax(~(values > 0))])
        raise InvalidNonlinearityError(f"f({bad:g}) <= 0 for {nl.label}")
    exponent = ts * np.asarray(nl.derivative(ts)) / values - 1.0
    m, big_m = float(exponent.min()), float(exponent.max())
    holds = m > 0
    reason = "" if holds else f"m = {m:.4g} is not positive"
    return FConstants(m=m, M=big_m, holds=holds, reason=reason)


def constants(nl: Nonlinearity) -> tuple[float, float]:
    """Analytic (m, M) when available, grid estimates otherwise."""
    analytic = nl.analytic_constants
    if analytic is not None:
        return analytic
    estimate = check_F(nl)
    return estimate.m, estimate.M


@functools.lru_cache(maxsize=1 << 14)
def _big_F_quad(nl: Nonlinearity, x: float) -> float:
    head, _ = integrate.quad(lambda s: float(nl.value(s)), 0.0, min(x, 1.0), epsabs=0.0, epsrel=1e-10, limit=200)
    if x <= 1.0:
        return head
    tail, _ = integrate.quad(
        lambda u: float(nl.value(math.exp(u))) * math.exp(u), 0.0, math.log(x), epsabs=0.0, epsrel=1e-10, limit=200
    )
    return head + tail


def big_F(nl: Nonlinearity, x: float) -> float:
    """F(t) = ∫_0^t f(s) ds."""
    if x < 0:
        raise InvalidNonlinearityError("F is only defined on [0, inf)")
    if x == 0 or nl.family is NonlinearityFamily.ZERO:
        return 0.0
    if nl.family is NonlinearityFamily.POWER:
        p = float(nl.p)
        return x ** (p + 1.0) / (p + 1.0)
    return _big_F_quad(nl, float(x))


@functools.lru_cache(maxsize=1 << 14)
def _varphi_quad(nl: Nonlinearity, x: float) -> float:
    def integrand(u: float) -> float:
        s = x * math.exp(u)
        return s / math.sqrt(big_F(nl, s))

    span = 40.0
    while True:
        end = x * math.exp(span)
        end_F = big_F(nl, end)
        if not math.isfinite(end_F):
            body, _ = integrate.quad(integrand, 0.0, span, epsabs=0.0, epsrel=1e-10, limit=400)
            return body
        growth = end * float(nl.value(end)) / end_F - 2.0
        if growth <= 0:
            raise ConditionError(f"the integral of F^(-1/2) diverges for {nl.label}")
        tail = 2.0 * end / (growth * math.sqrt(end_F))
        body, _ = integrate.quad(integrand, 0.0, span, epsabs=0.0, epsrel=1e-10, limit=400)
        if tail < 1e-10 * body or span >= 200.0:
            return body + tail
        span += 10.0


def ko_varphi(nl: Nonlinearity, x: float) -> float:
    """
    ϕ(t) = ∫_t^∞ ds/√F(s), with the tail beyond the quadrature range bounded from the local
    growth exponent of F.

    Raises:
        ConditionError: the tail diverges.
    """
    if not x > 0:
        raise DomainError(f"varphi needs t > 0, got {x}")
    if nl.family is NonlinearityFamily.ZERO:
        raise ConditionError("varphi is infinite for f = 0")
    if nl.family is NonlinearityFamily.POWER:
        p = float(nl.p)
        return 2.0 * math.sqrt(p + 1.0) / (p - 1.0) * x ** ((1.0 - p) / 2.0)
    return _varphi_quad(nl, float(x))


def ko_psi(nl: Nonlinearity, s: float) -> float:
    """ψ = ϕ^{-1}, by bracketing root finding in log t."""
    if not s > 0:
        raise DomainError(f"psi needs s > 0, got {s}")
    if nl.family is NonlinearityFamily.POWER:
        p = float(nl.p)
        return (s * (p - 1.0) / (2.0 * math.sqrt(p + 1.0))) ** (2.0 / (1.0 - p))
    log_s = math.log(s)

    def gap(u: float) -> float:
        return math.log(ko_varphi(nl, math.exp(u))) - log_s

    lo, hi = -1.0, 1.0
    while gap(lo) < 0:
        lo *= 2.0
        if lo < -_LOG_T_LIMIT:
            raise RangeError(f"psi({s:g}) has no bracket for {nl.label}")
    while gap(hi) > 0:
        hi *= 2.0
        if hi > _LOG_T_LIMIT:
            raise RangeError(f"psi({s:g}) has no bracket for {nl.label}")
    return math.exp(optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=300))


# ---------------------------------------------------------------------------------------------
# Condition checks


class Verdict(str, Enum):
    HOLDS = "holds"
    FAILS = "fails"
    INCONCLUSIVE = "inconclusive"


def dyadic_verdict(blocks: t.Sequence[float], eps: float = DYADIC_EPS, lag: int = DYADIC_LAG) -> tuple[Verdict, float]:
    """
    Geometric test on the last dyadic blocks of an integral: the blocks of a convergent tail
    shrink, those of a divergent one do not.
    """
    last, earlier = blocks[-1], blocks[-1 - lag]
    if earlier <= 0:
        return Verdict.INCONCLUSIVE, math.nan
    ratio = last / earlier
    if ratio < 1.0 - eps:
        return Verdict.HOLDS, ratio
    if ratio > 1.0 + eps:
        return Verdict.FAILS, ratio
    return Verdict.INCONCLUSIVE, ratio


class KO1Result(BaseModel):
    verdict: Verdict
    ratio: float
    grid: list[float]
    blocks: list[float]
    tail_values: list[float]

    @property
    def converges(self: t.Self) -> Verdict:
        return self.verdict


class KO2Result(BaseModel):
    verdict: Verdict
    ratio_sup: float | None
    r_grid: list[float]
    ratios: list[float]


class IntegrabilityResult(BaseModel):
    verdict: Verdict
    ratio: float
    value: float | None
    grid: list[float]
    blocks: list[float]

    @property
    def converges(self: t.Self) -> Verdict:
        return self.verdict


class BlowupResult(BaseModel):
    verdict: Verdict
    ratio: float
    s_grid: list[float]
    ratios: list[float]

    @property
    def diverges(self: t.Self) -> Verdict:
        return self.verdict


class KOReport(BaseModel):
    phi_label: str
    f_label: str
    ko1: KO1Result
    ko2: KO2Result
    integrability: IntegrabilityResult
    boundary_blowup: BlowupResult

    def failures(self: t.Self) -> list[str]:
        """Messages for every condition that does not hold, e.g. "KO1 fails"."""
        checks = (
            ("KO1", self.ko1.verdict),
            ("KO2", self.ko2.verdict),
            ("integrability", self.integrability.verdict),
            ("boundary blowup", self.boundary_blowup.verdict),
        )
        return [f"{name} {verdict.value}" for name, verdict in checks if verdict is not Verdict.HOLDS]

    @property
    def passed(self: t.Self) -> bool:
        return not self.failures()


def _ko_integrand(nl: Nonlinearity, spec: BernsteinSpec, x: float) -> float:
    return 1.0 / phi_inverse(spec, ko_varphi(nl, x) ** -2.0)


def _log_block(fn: t.Callable[[float], float], lo: float, hi: float) -> float:
    value, _ = integrate.quad(lambda u: fn(math.exp(u)) * math.exp(u), math.log(lo), math.log(hi), epsrel=1e-9, limit=100)
    return value


def _tails(blocks: list[float], verdict: Verdict, ratio: float, lag: int) -> list[float]:
    """Partial tails Σ_{i≥k} b_i with the geometric remainder past the last block."""
    remainder = math.inf
    if verdict is Verdict.HOLDS:
        q = ratio ** (1.0 / lag)
        remainder = blocks[-1] * q / (1.0 - q)
    tails = []
    running = remainder
    for block in reversed(blocks):
        running += block
        tails.append(running)
    return list(reversed(tails))


def ko_checks(
    nl: Nonlinearity,
    spec: BernsteinSpec,
    eps: float = DYADIC_EPS,
    lag: int = DYADIC_LAG,
    blocks: int = DYADIC_BLOCKS,
) -> KOReport:
    """
    Decide KO1, KO2, the integrability condition and the boundary blow-up condition.

    Every decision is a tri-state verdict taken from dyadic blocks compared `lag` steps apart.

    Raises:
        ConditionError: nl fails the F-condition or spec fails the scaling certificate.
    """
    f_constants = check_F(nl)
    if not f_constants.holds:
        raise ConditionError(f"nonlinearity {nl.label} fails the F-condition: {f_constants.reason}")
    certificate = default_certificate(spec)
    if not certificate.holds:
        raise ConditionError(f"spec {spec.label} fails the scaling certificate: {certificate.reason}")

    # KO1 on t ∈ [1, 2^(K+1)]
    grid = [2.0**k for k in range(blocks + 1)]
    ko1_blocks = [_log_block(lambda x: _ko_integrand(nl, spec, x), grid[k], 2.0 * grid[k]) for k in range(blocks + 1)]
    ko1_verdict, ko1_ratio = dyadic_verdict(ko1_blocks, eps, lag)
    tails = _tails(ko1_blocks, ko1_verdict, ko1_ratio, lag)
    ko1 = KO1Result(verdict=ko1_verdict, ratio=ko1_ratio, grid=grid, blocks=ko1_blocks, tail_values=tails)
    LOGGER.debug("KO1 %s (ratio %.4g) for %s, %s", ko1_verdict.value, ko1_ratio, spec.label, nl.label)

    # KO2 on r = 1, 2, ..., 2^16 from the same blocks
    r_grid = [2.0**k for k in range(KO2_POWERS + 1)]
    if ko1_verdict is Verdict.HOLDS:
        ratios = [tails[k] / (r * _ko_integrand(nl, spec, r)) for k, r in enumerate(r_grid)]
        ko2 = KO2Result(verdict=Verdict.HOLDS, ratio_sup=max(ratios), r_grid=r_grid, ratios=ratios)
    else:
        ko2 = KO2Result(verdict=ko1_verdict, ratio_sup=None, r_grid=r_grid, ratios=[])

    # integrability on s ∈ (0, 1], blocks [2^(-k-1), 2^(-k)]
    def integrand(s: float) -> float:
        return float(nl.value(1.0 / (s * phi_eval(spec, 1.0 / s))))

    s_grid = [2.0**-k for k in range(blocks + 1)]
    int_blocks = [_log_block(integrand, s / 2.0, s) for s in s_grid]
    int_verdict, int_ratio = dyadic_verdict(int_blocks, eps, lag)
    int_value = None
    if int_verdict is Verdict.HOLDS:
        int_value = _tails(int_blocks, int_verdict, int_ratio, lag)[0]
    integrability = IntegrabilityResult(
        verdict=int_verdict, ratio=int_ratio, value=int_value, grid=s_grid, blocks=int_blocks
    )

    # boundary blow-up: ψ(s)/(s² φ^{-1}(s^{-2})) along s = 2^(-k)
    blow_ratios = [ko_psi(nl, s) / (s * s * phi_inverse(spec, s**-2.0)) for s in s_grid]
    growth_verdict, growth = dyadic_verdict(blow_ratios, eps, lag)
    # growth of the ratio means divergence, which is the condition holding
    blow_verdict = {
        Verdict.HOLDS: Verdict.FAILS,
        Verdict.FAILS: Verdict.HOLDS,
        Verdict.INCONCLUSIVE: Verdict.INCONCLUSIVE,
    }[growth_verdict]
    blowup = BlowupResult(verdict=blow_verdict, ratio=growth, s_grid=s_grid, ratios=blow_ratios)

    report = KOReport(
        phi_label=spec.label,
        f_label=nl.label,
        ko1=ko1,
        ko2=ko2,
        integrability=integrability,
        boundary_blowup=blowup,
    )
    for failure in report.failures():
        LOGGER.warning("%s for %s, %s", failure, spec.label, nl.label)
    return report


# ---------------------------------------------------------------------------------------------
# Transform diagnostics


class TransformDiagnostics(BaseModel):
    varphi_comparability: RatioTable
    varphi_bound: float
    varphi_derivative: RatioTable
    psi_derivative: RatioTable
    psi_second: RatioTable
    m: float
    M: float

    @property
    def varphi_within_bound(self: t.Self) -> bool:
        return self.varphi_comparability.spread <= self.varphi_bound

    @property
    def varphi_derivative_within(self: t.Self) -> bool:
        values = self.varphi_derivative.values
        return min(values) >= self.m / 2 * (1 - 1e-4) and max(values) <= self.M / 2 * (1 + 1e-4)

    @property
    def psi_derivative_within(self: t.Self) -> bool:
        values = self.psi_derivative.values
        return min(values) >= 2 / self.M * (1 - 1e-4) and max(values) <= 2 / self.m * (1 + 1e-4)


def transform_diagnostics(nl: Nonlinearity, t_grid: t.Sequence[float] | None = None) -> TransformDiagnostics:
    """
    Sampled comparability of ϕ with √(t/f), the derivative sandwiches of ϕ and ψ and the
    second-derivative diagnostic t²ψ″/ψ.
    """
    ts = np.asarray(t_grid if t_grid is not None else log_grid(1e-3, 1e3, 25), dtype=float)
    m, big_m = constants(nl)
    varphi = np.array([ko_varphi(nl, x) for x in ts])
    comparability = varphi / np.sqrt(ts / np.asarray(nl.value(ts)))
    bound = (big_m / m) * math.sqrt((2.0 + big_m) / (2.0 + m)) * 1.05

    h = 1e-4 * ts
    dvarphi = np.array([(ko_varphi(nl, x + dx) - ko_varphi(nl, x - dx)) / (2 * dx) for x, dx in zip(ts, h)])
    varphi_ratio = np.abs(dvarphi) * ts / varphi

    s_grid = varphi
    psi = np.array([ko_psi(nl, s) for s in s_grid])
    hs = 1e-4 * s_grid
    psi_plus = np.array([ko_psi(nl, s + dh) for s, dh in zip(s_grid, hs)])
    psi_minus = np.array([ko_psi(nl, s - dh) for s, dh in zip(s_grid, hs)])
    dpsi = (psi_plus - psi_minus) / (2 * hs)
    d2psi = (psi_plus - 2 * psi + psi_minus) / hs**2
    return TransformDiagnostics(
        varphi_comparability=RatioTable(label="varphi/sqrt(t/f)", points=ts.tolist(), values=comparability.tolist()),
        varphi_bound=bound,
        varphi_derivative=RatioTable(label="|varphi'|t/varphi", points=ts.tolist(), values=varphi_ratio.tolist()),
        psi_derivative=RatioTable(
            label="|psi'|s/psi", points=s_grid.tolist(), values=(np.abs(dpsi) * s_grid / psi).tolist()
        ),
        psi_second=RatioTable(label="s^2 psi''/psi", points=s_grid.tolist(), values=(s_grid**2 * d2psi / psi).tolist()),
        m=m,
        M=big_m,
    )
