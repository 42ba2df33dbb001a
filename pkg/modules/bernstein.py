"""Complete Bernstein functions and the subordinator quantities derived from them."""

from __future__ import annotations

import functools
import json
import logging
import math
import typing as t
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import mpmath
import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import integrate, optimize, special

from modules.errors import DomainError, NumericalError, RangeError
from modules.utils import RatioTable, log_grid

LOGGER = logging.getLogger(__name__)

STEHFEST_STAGES = (12, 14, 16, 18)
STEHFEST_AGREEMENT = 1e-10
STEHFEST_STAGNATION = 1e-4
_LOG_LAM_MIN = math.log(1e-300)
_LOG_LAM_MAX = math.log(1e300)
# exp() of the log-variable integrands stays finite and nonzero inside this window
_LOG_CUTOFF = 700.0


class Family(str, Enum):
    STABLE = "stable"
    SUM_OF_STABLES = "sum_of_stables"
    TEMPERED_STABLE = "tempered_stable"
    RELATIVISTIC = "relativistic"
    CUSTOM = "custom"
    CONJUGATE = "conjugate"
    # φ(λ) = λ, Brownian motion itself; a control for the classical Green function.
    IDENTITY = "identity"


class BernsteinSpec(BaseModel):
    """
    A complete Bernstein function φ with zero drift.

    Closed-form families carry their parameters, `custom` carries a Lévy density callable and
    `conjugate` wraps the spec whose conjugate it is. `closed_form=False` forces the generic
    inversion path for the potential and Lévy densities.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    family: Family
    alpha: float | None = None
    weights: tuple[float, ...] | None = None
    exponents: tuple[float, ...] | None = None
    theta: float | None = None
    mass: float | None = None
    levy: t.Callable[[float], float] | None = None
    base: t.Optional["BernsteinSpec"] = None
    label: str = ""
    closed_form: bool = True

    @model_validator(mode="after")
    def _check_parameters(self: t.Self) -> t.Self:
        match self.family:
            case Family.STABLE | Family.TEMPERED_STABLE | Family.RELATIVISTIC:
                if self.alpha is None or not 0 < self.alpha < 2:
                    raise ValueError(f"{self.family.value} needs alpha in (0, 2), got {self.alpha}")
                if self.family is Family.TEMPERED_STABLE and not (self.theta or 0) > 0:
                    raise ValueError("tempered_stable needs theta > 0")
                if self.family is Family.RELATIVISTIC and not (self.mass or 0) > 0:
                    raise ValueError("relativistic needs mass > 0")
            case Family.SUM_OF_STABLES:
                if not self.weights or not self.exponents or len(self.weights) != len(self.exponents):
                    raise ValueError("sum_of_stables needs weights and exponents of equal length")
                if any(w <= 0 for w in self.weights) or any(not 0 < b < 1 for b in self.exponents):
                    raise ValueError("sum_of_stables needs positive weights and exponents in (0, 1)")
            case Family.CUSTOM:
                if self.levy is None or not callable(self.levy):
                    raise ValueError("custom family needs a levy density callable")
            case Family.CONJUGATE:
                if self.base is None:
                    raise ValueError("conjugate family needs a base spec")
        return self

    @classmethod
    def stable(cls: type[t.Self], alpha: float, **kwargs: t.Any) -> t.Self:
        return cls(family=Family.STABLE, alpha=alpha, label=kwargs.pop("label", f"stable({alpha:g})"), **kwargs)

    @classmethod
    def sum_of_stables(cls: type[t.Self], weights: t.Sequence[float], exponents: t.Sequence[float]) -> t.Self:
        terms = "+".join(f"{w:g}λ^{b:g}" for w, b in zip(weights, exponents))
        return cls(
            family=Family.SUM_OF_STABLES, weights=tuple(weights), exponents=tuple(exponents), label=terms
        )

    @classmethod
    def tempered_stable(cls: type[t.Self], alpha: float, theta: float) -> t.Self:
        return cls(
            family=Family.TEMPERED_STABLE, alpha=alpha, theta=theta, label=f"tempered({alpha:g},{theta:g})"
        )

    @classmethod
    def relativistic(cls: type[t.Self], alpha: float, mass: float) -> t.Self:
        return cls(family=Family.RELATIVISTIC, alpha=alpha, mass=mass, label=f"relativistic({alpha:g},{mass:g})")

    @classmethod
    def custom(cls: type[t.Self], levy: t.Callable[[float], float], label: str = "custom") -> t.Self:
        return cls(family=Family.CUSTOM, levy=levy, label=label)

    @classmethod
    def identity(cls: type[t.Self]) -> t.Self:
        return cls(family=Family.IDENTITY, label="identity")

    def generic(self: t.Self) -> t.Self:
        """Copy of this spec that skips the closed forms of the densities."""
        return self.model_copy(update={"closed_form": False})

    @property
    def tempering(self: t.Self) -> float:
        """Exponential damping rate θ of the Lévy density for the tempered families."""
        if self.family is Family.TEMPERED_STABLE:
            return float(self.theta)
        if self.family is Family.RELATIVISTIC:
            return float(self.mass) ** (2.0 / float(self.alpha))
        return 0.0


BernsteinSpec.model_rebuild()


def spec_to_dict(spec: BernsteinSpec) -> dict[str, t.Any]:
    parameters: dict[str, t.Any]
    match spec.family:
        case Family.STABLE:
            parameters = {"alpha": spec.alpha}
        case Family.SUM_OF_STABLES:
            parameters = {"weights": list(spec.weights or ()), "exponents": list(spec.exponents or ())}
        case Family.TEMPERED_STABLE:
            parameters = {"alpha": spec.alpha, "theta": spec.theta}
        case Family.RELATIVISTIC:
            parameters = {"alpha": spec.alpha, "mass": spec.mass}
        case Family.CONJUGATE:
            parameters = {"base": spec_to_dict(t.cast(BernsteinSpec, spec.base))}
        case Family.IDENTITY:
            parameters = {}
        case _:
            raise DomainError("custom specs hold a callable Lévy density and cannot be serialized")
    return {"family": spec.family.value, "parameters": parameters, "label": spec.label}


def spec_from_dict(payload: dict[str, t.Any]) -> BernsteinSpec:
    family = Family(payload["family"])
    parameters = dict(payload.get("parameters", {}))
    if family is Family.CUSTOM:
        raise DomainError("custom specs must be constructed in code")
    if family is Family.CONJUGATE:
        parameters["base"] = spec_from_dict(parameters["base"])
    for key in ("weights", "exponents"):
        if key in parameters:
            parameters[key] = tuple(parameters[key])
    return BernsteinSpec(family=family, label=payload.get("label", family.value), **parameters)


def load_spec(path: str | Path) -> BernsteinSpec:
    with open(path, "r") as handle:
        return spec_from_dict(json.load(handle))


# ---------------------------------------------------------------------------------------------
# Laplace exponent


def _custom_phi(spec: BernsteinSpec, lam: float) -> float:
    levy = t.cast(t.Callable[[float], float], spec.levy)

    def integrand(s: float) -> float:
        if abs(s) > _LOG_CUTOFF:
            return 0.0
        u = math.exp(s)
        return -math.expm1(-lam * u) * levy(u) * u

    split = -math.log(lam)
    return _quad_log(integrand, split, f"phi({spec.label}, {lam:g})")


def _custom_dphi(spec: BernsteinSpec, lam: float) -> float:
    levy = t.cast(t.Callable[[float], float], spec.levy)

    def integrand(s: float) -> float:
        if abs(s) > _LOG_CUTOFF:
            return 0.0
        u = math.exp(s)
        return u * u * math.exp(-lam * u) * levy(u)

    return _quad_log(integrand, -math.log(lam), f"phi'({spec.label}, {lam:g})")


def _quad_log(integrand: t.Callable[[float], float], split: float, what: str) -> float:
    total = 0.0
    errors = 0.0
    for lo, hi in ((-math.inf, split), (split, math.inf)):
        value, abserr, info, *rest = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-10, limit=200, full_output=1)
        total += value
        errors += abserr
        if rest and abserr > 1e-8 * abs(value):
            raise NumericalError(
                f"quadrature did not converge for {what}",
                {"message": rest[0], "abserr": abserr, "value": value, "neval": info["neval"]},
            )
    return total


def _phi_array(spec: BernsteinSpec, lam: np.ndarray) -> np.ndarray:
    match spec.family:
        case Family.STABLE:
            return lam ** (spec.alpha / 2.0)
        case Family.SUM_OF_STABLES:
            return sum(w * lam**b for w, b in zip(spec.weights, spec.exponents))
        case Family.TEMPERED_STABLE:
            theta = float(spec.theta)
            return theta ** (spec.alpha / 2.0) * np.expm1(spec.alpha / 2.0 * np.log1p(lam / theta))
        case Family.RELATIVISTIC:
            return spec.mass * np.expm1(spec.alpha / 2.0 * np.log1p(lam / spec.tempering))
        case Family.CONJUGATE:
            return lam / _phi_array(t.cast(BernsteinSpec, spec.base), lam)
        case Family.IDENTITY:
            return lam.astype(float)
        case _:
            return np.array([_custom_phi(spec, float(v)) for v in lam.ravel()]).reshape(lam.shape)


def _dphi_array(spec: BernsteinSpec, lam: np.ndarray) -> np.ndarray:
    match spec.family:
        case Family.STABLE:
            return spec.alpha / 2.0 * lam ** (spec.alpha / 2.0 - 1.0)
        case Family.SUM_OF_STABLES:
            return sum(w * b * lam ** (b - 1.0) for w, b in zip(spec.weights, spec.exponents))
        case Family.TEMPERED_STABLE | Family.RELATIVISTIC:
            return spec.alpha / 2.0 * (lam + spec.tempering) ** (spec.alpha / 2.0 - 1.0)
        case Family.CONJUGATE:
            base = t.cast(BernsteinSpec, spec.base)
            value = _phi_array(base, lam)
            return (value - lam * _dphi_array(base, lam)) / value**2
        case Family.IDENTITY:
            return np.ones_like(lam, dtype=float)
        case _:
            return np.array([_custom_dphi(spec, float(v)) for v in lam.ravel()]).reshape(lam.shape)


def _positive_array(values: float | np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{name} must be positive, got {values}")
    return arr


def phi_eval(spec: BernsteinSpec, lam: float | np.ndarray) -> float | np.ndarray:
    """
    Evaluate φ(lam).

    Args:
        spec (BernsteinSpec): The Bernstein function.
        lam (float | np.ndarray): Positive argument(s).

    Returns:
        float | np.ndarray: φ(lam) with the shape of lam.

    Raises:
        DomainError: lam is not positive.
        NumericalError: the Lévy integral of a custom spec did not converge.
    """
    arr = _positive_array(lam, "lam")
    value = _phi_array(spec, arr)
    return float(value) if np.ndim(lam) == 0 else value


def phi_derivative(spec: BernsteinSpec, lam: float | np.ndarray) -> float | np.ndarray:
    arr = _positive_array(lam, "lam")
    value = _dphi_array(spec, arr)
    return float(value) if np.ndim(lam) == 0 else value


def phi_inverse(spec: BernsteinSpec, y: float) -> float:
    """
    Solve φ(λ) = y for λ by bracketing root finding in log λ.

    Raises:
        DomainError: y is not positive.
        RangeError: no bracket inside [1e-300, 1e300].
    """
    if not y > 0:
        raise DomainError(f"phi_inverse needs y > 0, got {y}")
    if spec.family is Family.STABLE:
        return y ** (2.0 / float(spec.alpha))
    if spec.family is Family.IDENTITY:
        return float(y)
    log_y = math.log(y)

    def gap(s: float) -> float:
        return math.log(float(_phi_array(spec, np.array(math.exp(s))))) - log_y

    lo, hi = min(log_y, 0.0) - 1.0, max(log_y, 0.0) + 1.0
    step = 2.0
    while gap(lo) > 0:
        lo -= step
        step *= 2.0
        if lo < _LOG_LAM_MIN:
            raise RangeError(f"phi_inverse({spec.label}, {y:g}): no lower bracket above 1e-300")
    step = 2.0
    while gap(hi) < 0:
        hi += step
        step *= 2.0
        if hi > _LOG_LAM_MAX:
            raise RangeError(f"phi_inverse({spec.label}, {y:g}): no upper bracket below 1e300")
    root = optimize.brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=300)
    return math.exp(root)


def conjugate(spec: BernsteinSpec) -> BernsteinSpec:
    """Return the spec of λ ↦ λ/φ(λ), keeping the stable family closed under conjugation."""
    if spec.family is Family.STABLE:
        return BernsteinSpec.stable(2.0 - float(spec.alpha))
    if spec.family is Family.CONJUGATE:
        return t.cast(BernsteinSpec, spec.base)
    return BernsteinSpec(family=Family.CONJUGATE, base=spec, label=f"conjugate({spec.label})")


# ---------------------------------------------------------------------------------------------
# Scaling


class ScalingCertificate(BaseModel):
    delta1: float
    delta2: float
    a1: float
    a2: float
    grid: list[tuple[float, float]]
    holds: bool
    reason: str = ""

    def sandwich_holds(self: t.Self, spec: BernsteinSpec, t_grid: t.Iterable[float], lam_grid: t.Iterable[float], rtol: float = 1e-6) -> bool:
        """Re-check a1·λ^δ1·φ(t) ≤ φ(λt) ≤ a2·λ^δ2·φ(t) on another grid."""
        for t_val in t_grid:
            base = phi_eval(spec, t_val)
            for lam in lam_grid:
                value = phi_eval(spec, lam * t_val)
                if value < self.a1 * lam**self.delta1 * base * (1 - rtol):
                    return False
                if value > self.a2 * lam**self.delta2 * base * (1 + rtol):
                    return False
        return True


def scaling_certificate(spec: BernsteinSpec, t_grid: t.Sequence[float], lam_grid: t.Sequence[float]) -> ScalingCertificate:
    """
    Estimate the lower and upper scaling indices of φ at infinity on a grid.

    Args:
        spec (BernsteinSpec): The Bernstein function.
        t_grid: Sample points t ≥ 1.
        lam_grid: Dilations λ ≥ 1.

    Returns:
        ScalingCertificate: The indices with `holds` false when the spec is outside 0 < δ1 ≤ δ2 < 1.
    """
    ts = np.asarray(t_grid, dtype=float)
    lams = np.asarray(lam_grid, dtype=float)
    if np.any(ts < 1) or np.any(lams < 1):
        raise DomainError("scaling certificate grids must lie in [1, inf)")
    lams = lams[lams > 1]
    if lams.size == 0:
        raise DomainError("scaling certificate needs at least one dilation above 1")
    tt, ll = np.meshgrid(ts, lams, indexing="ij")
    ratio = np.asarray(phi_eval(spec, ll * tt)) / np.asarray(phi_eval(spec, tt))
    exponent = np.log(ratio) / np.log(ll)
    delta1 = float(exponent.min())
    delta2 = float(exponent.max())
    a1 = float(min(1.0, np.min(ll ** (exponent - delta1))))
    a2 = float(max(1.0, np.max(ll ** (exponent - delta2))))
    holds = 0 < delta1 <= delta2 < 1
    reason = ""
    if not holds:
        reason = f"indices ({delta1:.4g}, {delta2:.4g}) outside 0 < delta1 <= delta2 < 1"
        LOGGER.warning("scaling certificate fails for %s: %s", spec.label, reason)
    grid = [(float(a), float(b)) for a, b in zip(tt.ravel(), ll.ravel())]
    return ScalingCertificate(delta1=delta1, delta2=delta2, a1=a1, a2=a2, grid=grid, holds=holds, reason=reason)


def default_certificate(spec: BernsteinSpec) -> ScalingCertificate:
    grid = log_grid(1.0, 1e6, 25)
    return scaling_certificate(spec, grid, grid)


def derivative_ratio_check(spec: BernsteinSpec, lam_grid: t.Sequence[float]) -> RatioTable:
    """Table of λφ′(λ)/φ(λ) by central differences with step 1e-4·λ."""
    lams = np.asarray(lam_grid, dtype=float)
    if np.any(lams < 1):
        raise DomainError("derivative ratio grid must lie in [1, inf)")
    h = 1e-4 * lams
    slope = (np.asarray(phi_eval(spec, lams + h)) - np.asarray(phi_eval(spec, lams - h))) / (2 * h)
    values = lams * slope / np.asarray(phi_eval(spec, lams))
    return RatioTable(label="lambda*phi'/phi", points=lams.tolist(), values=values.tolist())


# ---------------------------------------------------------------------------------------------
# Densities by closed form or Gaver-Stehfest inversion


def _phi_mp(spec: BernsteinSpec, s: t.Any) -> t.Any:
    match spec.family:
        case Family.STABLE:
            return s ** (mpmath.mpf(spec.alpha) / 2)
        case Family.SUM_OF_STABLES:
            return mpmath.fsum(mpmath.mpf(w) * s ** mpmath.mpf(b) for w, b in zip(spec.weights, spec.exponents))
        case Family.TEMPERED_STABLE:
            half = mpmath.mpf(spec.alpha) / 2
            theta = mpmath.mpf(spec.theta)
            return (s + theta) ** half - theta**half
        case Family.RELATIVISTIC:
            half = mpmath.mpf(spec.alpha) / 2
            return (s + mpmath.mpf(spec.tempering)) ** half - mpmath.mpf(spec.mass)
        case Family.CONJUGATE:
            return s / _phi_mp(t.cast(BernsteinSpec, spec.base), s)
        case Family.IDENTITY:
            return s
        case _:
            return mpmath.mpf(_custom_phi(spec, float(s)))


def _dphi_mp(spec: BernsteinSpec, s: t.Any) -> t.Any:
    match spec.family:
        case Family.STABLE | Family.TEMPERED_STABLE | Family.RELATIVISTIC:
            half = mpmath.mpf(spec.alpha) / 2
            return half * (s + mpmath.mpf(spec.tempering)) ** (half - 1)
        case Family.SUM_OF_STABLES:
            return mpmath.fsum(
                mpmath.mpf(w) * mpmath.mpf(b) * s ** (mpmath.mpf(b) - 1) for w, b in zip(spec.weights, spec.exponents)
            )
        case Family.CONJUGATE:
            base = t.cast(BernsteinSpec, spec.base)
            value = _phi_mp(base, s)
            return (value - s * _dphi_mp(base, s)) / value**2
        case Family.IDENTITY:
            return mpmath.mpf(1)
        case _:
            return mpmath.mpf(_custom_dphi(spec, float(s)))


def stehfest_invert(transform: t.Callable[[t.Any], t.Any], t_val: float, what: str = "") -> float:
    """
    Gaver-Stehfest inversion with the stage count chosen by agreement of successive stages.

    Raises:
        NumericalError: the smallest inter-stage gap stays above the stagnation threshold.
    """
    previous: float | None = None
    best_gap = math.inf
    best_value = math.nan
    gaps = []
    for degree in STEHFEST_STAGES:
        value = float(mpmath.invertlaplace(transform, t_val, method="stehfest", degree=degree))
        if previous is not None:
            gap = abs(value - previous) / max(abs(value), 1e-300)
            gaps.append(gap)
            if gap < best_gap:
                best_gap, best_value = gap, value
            if gap < STEHFEST_AGREEMENT:
                return value
        previous = value
    if best_gap > STEHFEST_STAGNATION:
        raise NumericalError(
            f"Laplace inversion stagnated for {what} at t={t_val:g}",
            {"stages": list(STEHFEST_STAGES), "gaps": gaps},
        )
    return best_value


@functools.lru_cache(maxsize=1 << 16)
def _inverted(spec: BernsteinSpec, kind: str, t_val: float) -> float:
    if kind == "potential":
        return stehfest_invert(lambda s: 1 / _phi_mp(spec, s), t_val, f"potential density of {spec.label}")
    if kind == "levy":
        return stehfest_invert(lambda s: _dphi_mp(spec, s), t_val, f"Levy density of {spec.label}") / t_val
    return stehfest_invert(lambda s: _phi_mp(spec, s) / s, t_val, f"Levy tail of {spec.label}")


def _inverted_array(spec: BernsteinSpec, kind: str, ts: np.ndarray) -> np.ndarray:
    return np.array([_inverted(spec, kind, float(v)) for v in ts.ravel()]).reshape(ts.shape)


def _maybe_scalar(value: np.ndarray, like: float | np.ndarray) -> float | np.ndarray:
    return float(value) if np.ndim(like) == 0 else value


def potential_density(spec: BernsteinSpec, t_val: float | np.ndarray) -> float | np.ndarray:
    """Density 𝔲 of the potential measure, whose Laplace transform is 1/φ."""
    ts = _positive_array(t_val, "t")
    if spec.closed_form and spec.family is Family.STABLE:
        half = float(spec.alpha) / 2.0
        return _maybe_scalar(ts ** (half - 1.0) / special.gamma(half), t_val)
    if spec.family is Family.IDENTITY:
        return _maybe_scalar(np.ones_like(ts), t_val)
    return _maybe_scalar(_inverted_array(spec, "potential", ts), t_val)


def levy_density(spec: BernsteinSpec, t_val: float | np.ndarray) -> float | np.ndarray:
    """Density μ of the Lévy measure; t·μ(t) has Laplace transform φ′."""
    ts = _positive_array(t_val, "t")
    if spec.family is Family.IDENTITY:
        return _maybe_scalar(np.zeros_like(ts), t_val)
    if spec.family is Family.CUSTOM:
        levy = t.cast(t.Callable[[float], float], spec.levy)
        return _maybe_scalar(np.array([levy(float(v)) for v in ts.ravel()]).reshape(ts.shape), t_val)
    if spec.closed_form:
        if spec.family is Family.SUM_OF_STABLES:
            value = sum(w * b / special.gamma(1.0 - b) * ts ** (-1.0 - b) for w, b in zip(spec.weights, spec.exponents))
            return _maybe_scalar(value, t_val)
        if spec.family in (Family.STABLE, Family.TEMPERED_STABLE, Family.RELATIVISTIC):
            half = float(spec.alpha) / 2.0
            value = half / special.gamma(1.0 - half) * ts ** (-1.0 - half) * np.exp(-spec.tempering * ts)
            return _maybe_scalar(value, t_val)
    return _maybe_scalar(_inverted_array(spec, "levy", ts), t_val)


def levy_tail(spec: BernsteinSpec, t_val: float | np.ndarray) -> float | np.ndarray:
    """Tail μ̄(t) = μ((t, ∞)); its Laplace transform is φ(λ)/λ."""
    ts = _positive_array(t_val, "t")
    if spec.family is Family.IDENTITY:
        return _maybe_scalar(np.zeros_like(ts), t_val)
    if spec.closed_form:
        if spec.family is Family.SUM_OF_STABLES:
            value = sum(w * ts ** (-b) / special.gamma(1.0 - b) for w, b in zip(spec.weights, spec.exponents))
            return _maybe_scalar(value, t_val)
        if spec.family is Family.STABLE:
            half = float(spec.alpha) / 2.0
            return _maybe_scalar(ts ** (-half) / special.gamma(1.0 - half), t_val)
        if spec.family in (Family.TEMPERED_STABLE, Family.RELATIVISTIC):
            half = float(spec.alpha) / 2.0
            theta = spec.tempering
            x = theta * ts
            value = theta**half * (
                x ** (-half) * np.exp(-x) / special.gamma(1.0 - half) - special.gammaincc(1.0 - half, x)
            )
            return _maybe_scalar(value, t_val)
    if spec.family is Family.CUSTOM:
        return _maybe_scalar(np.array([_custom_tail(spec, float(v)) for v in ts.ravel()]).reshape(ts.shape), t_val)
    return _maybe_scalar(_inverted_array(spec, "tail", ts), t_val)


def _custom_tail(spec: BernsteinSpec, t_val: float) -> float:
    levy = t.cast(t.Callable[[float], float], spec.levy)
    value, _ = integrate.quad(
        lambda s: 0.0 if s > _LOG_CUTOFF else levy(math.exp(s)) * math.exp(s),
        math.log(t_val),
        math.inf,
        epsrel=1e-10,
        limit=200,
    )
    return value


def stable_kernel_constant(d: int, alpha: float) -> float:
    """A(d, α) with j(r) = A(d, α) r^{-d-α} for the stable family."""
    return (
        alpha
        * 2.0 ** (alpha - 1.0)
        * math.pi ** (-d / 2.0)
        * special.gamma((d + alpha) / 2.0)
        / special.gamma(1.0 - alpha / 2.0)
    )


@functools.lru_cache(maxsize=1 << 16)
def _jump_kernel_quad(spec: BernsteinSpec, d: int, r: float) -> float:
    r2 = r * r

    def integrand(s: float) -> float:
        if abs(s) > _LOG_CUTOFF:
            return 0.0
        tt = math.exp(s)
        return (4 * math.pi * tt) ** (-d / 2.0) * math.exp(-r2 / (4 * tt)) * float(levy_density(spec, tt)) * tt

    split = math.log(r2)
    total = 0.0
    for lo, hi in ((-math.inf, split), (split, math.inf)):
        value, abserr, *rest = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-8, limit=200, full_output=1)
        if len(rest) > 1 and abserr > 1e-6 * abs(value):
            raise NumericalError(f"jump kernel quadrature failed at r={r:g}", {"abserr": abserr, "value": value})
        total += value
    return total


def jump_kernel(spec: BernsteinSpec, d: int, r: float | np.ndarray, closed_form: bool = False) -> float | np.ndarray:
    """
    Jump kernel j(r) = ∫ (4πt)^{-d/2} e^{-r²/4t} μ(t) dt of the subordinate Brownian motion.

    Args:
        spec (BernsteinSpec): The Bernstein function.
        d (int): Space dimension.
        r: Positive distance(s).
        closed_form (bool): Use A(d, α) r^{-d-α} for the stable family instead of quadrature.
    """
    rs = _positive_array(r, "r")
    if d < 1:
        raise DomainError(f"dimension must be at least 1, got {d}")
    if spec.family is Family.IDENTITY:
        return _maybe_scalar(np.zeros_like(rs), r)
    if closed_form and spec.family is Family.STABLE and spec.closed_form:
        alpha = float(spec.alpha)
        return _maybe_scalar(stable_kernel_constant(d, alpha) * rs ** (-d - alpha), r)
    value = np.array([_jump_kernel_quad(spec, d, float(v)) for v in rs.ravel()]).reshape(rs.shape)
    return _maybe_scalar(value, r)


def jump_kernel_moment(spec: BernsteinSpec, d: int, lo: float, hi: float, power: float) -> float:
    """∫_lo^hi r^power j(r) dr, used for the Taylor-compensated inner balls."""
    if spec.family is Family.STABLE and spec.closed_form:
        alpha = float(spec.alpha)
        exponent = power - d - alpha + 1.0
        const = stable_kernel_constant(d, alpha)
        lo_term = 0.0 if lo == 0 and exponent > 0 else lo**exponent
        return const * (hi**exponent - lo_term) / exponent
    if spec.family is Family.IDENTITY:
        return 0.0

    def integrand(s: float) -> float:
        if s > _LOG_CUTOFF:
            return 0.0
        return math.exp((power + 1) * s) * float(jump_kernel(spec, d, math.exp(s)))

    # below r = 1e-10 the compensated moments are negligible for every WSC spec
    lower = math.log(lo) if lo > 0 else math.log(1e-10)
    upper = math.log(hi) if math.isfinite(hi) else math.inf
    value, _ = integrate.quad(integrand, lower, upper, epsrel=1e-8, limit=200)
    return value


@dataclass(frozen=True)
class RenewalProxy:
    """Φ(t) = φ(t^{-2})^{-1/2}, comparable to the renewal function of the ladder-height process."""

    spec: BernsteinSpec

    def phi_big(self: t.Self, t_val: float | np.ndarray) -> float | np.ndarray:
        ts = _positive_array(t_val, "t")
        return _maybe_scalar(np.asarray(phi_eval(self.spec, ts**-2.0)) ** -0.5, t_val)

    __call__ = phi_big


def renewal_proxy(spec: BernsteinSpec) -> RenewalProxy:
    return RenewalProxy(spec)


# ---------------------------------------------------------------------------------------------
# Property checks


class SpecInvariants(BaseModel):
    vanishes_at_zero: bool
    increasing: bool
    concave: bool


def check_spec_invariants(spec: BernsteinSpec, grid: np.ndarray | None = None) -> SpecInvariants:
    lams = grid if grid is not None else log_grid(1e-8, 1e8, 161)
    values = np.asarray(phi_eval(spec, lams))
    # concavity on a log grid: slopes between consecutive samples must not increase
    slopes = np.diff(values) / np.diff(lams)
    vanishes = True
    if spec.family is not Family.CONJUGATE:
        vanishes = bool(phi_eval(spec, 1e-300) <= 1e-6 * phi_eval(spec, 1.0))
    return SpecInvariants(
        vanishes_at_zero=vanishes,
        increasing=bool(np.all(np.diff(values) > 0)),
        concave=bool(np.all(np.diff(slopes) <= 1e-12 * np.abs(slopes[:-1]) + 1e-300)),
    )


def global_scaling_check(spec: BernsteinSpec, rng: np.random.Generator, samples: int = 200) -> bool:
    """(1∧λ) ≤ φ(λt)/φ(t) ≤ (1∨λ) at random λ, t."""
    lam = np.exp(rng.uniform(-8, 8, samples))
    tt = np.exp(rng.uniform(-8, 8, samples))
    ratio = np.asarray(phi_eval(spec, lam * tt)) / np.asarray(phi_eval(spec, tt))
    tol = 1e-9
    return bool(np.all(ratio >= np.minimum(1, lam) * (1 - tol)) and np.all(ratio <= np.maximum(1, lam) * (1 + tol)))


def levy_shift_table(spec: BernsteinSpec, points: int = 10) -> RatioTable:
    ts = np.linspace(1.0, 10.0, points)
    values = np.asarray(levy_density(spec, ts)) / np.asarray(levy_density(spec, ts + 1.0))
    return RatioTable(label="mu(t)/mu(t+1)", points=ts.tolist(), values=values.tolist())


def jump_doubling_table(spec: BernsteinSpec, d: int, points: int = 9) -> RatioTable:
    rs = np.linspace(1.0, 3.0, points)
    values = np.asarray(jump_kernel(spec, d, rs)) / np.asarray(jump_kernel(spec, d, 2 * rs))
    return RatioTable(label="j(r)/j(2r)", points=rs.tolist(), values=values.tolist())


def jump_sharp_table(spec: BernsteinSpec, d: int, r_grid: t.Sequence[float], closed_form: bool = False) -> RatioTable:
    """j(r) r^d / φ(r^{-2}), bounded above and below by the sharp jump kernel bound."""
    rs = np.asarray(r_grid, dtype=float)
    values = np.asarray(jump_kernel(spec, d, rs, closed_form=closed_form)) * rs**d / np.asarray(phi_eval(spec, rs**-2.0))
    return RatioTable(label="j(r)r^d/phi(r^-2)", points=rs.tolist(), values=values.tolist())


def strictly_decreasing(values: t.Sequence[float]) -> bool:
    return bool(np.all(np.diff(np.asarray(values, dtype=float)) < 0))


class BernsteinReport(BaseModel):
    label: str
    certificate: ScalingCertificate
    invariants: SpecInvariants
    global_scaling: bool
    conjugation_max_error: float
    potential_decreasing: bool
    levy_decreasing: bool
    proxy_increasing: bool
    tables: list[RatioTable]

    @property
    def passed(self: t.Self) -> bool:
        return (
            self.certificate.holds
            and self.invariants.increasing
            and self.invariants.concave
            and self.global_scaling
            and self.conjugation_max_error < 1e-10
            and self.potential_decreasing
            and self.levy_decreasing
            and self.proxy_increasing
        )


def bernstein_report(spec: BernsteinSpec, d: int = 3, seed: int = 0) -> BernsteinReport:
    """Collect the certificate, the sampled invariants and every ratio table of a spec."""
    LOGGER.info("checking Bernstein spec %s", spec.label)
    certificate = default_certificate(spec)
    lams = log_grid(1e-3, 1e6, 46)
    product = np.asarray(phi_eval(spec, lams)) * np.asarray(phi_eval(conjugate(spec), lams))
    conj_error = float(np.max(np.abs(product / lams - 1.0)))
    ts = log_grid(1e-2, 1e2, 21)
    proxy = renewal_proxy(spec)
    tables = [
        derivative_ratio_check(spec, log_grid(1.0, 1e4, 17)),
        levy_shift_table(spec),
        jump_doubling_table(spec, d),
        jump_sharp_table(spec, d, log_grid(0.01, 1.0, 9)),
    ]
    return BernsteinReport(
        label=spec.label,
        certificate=certificate,
        invariants=check_spec_invariants(spec),
        global_scaling=global_scaling_check(spec, np.random.default_rng(seed)),
        conjugation_max_error=conj_error,
        potential_decreasing=strictly_decreasing(np.asarray(potential_density(spec, ts)).tolist()),
        levy_decreasing=strictly_decreasing(np.asarray(levy_density(spec, ts)).tolist()),
        proxy_increasing=bool(np.all(np.diff(np.asarray(proxy(log_grid(1e-4, 1.0, 21)))) > 0)),
        tables=tables,
    )


def potential_measure(spec: BernsteinSpec, t_val: float) -> float:
    """U(t) = ∫_0^t 𝔲(s) ds, the potential measure of (0, t]."""
    if not t_val > 0:
        raise DomainError(f"t must be positive, got {t_val}")
    if spec.family is Family.IDENTITY:
        return float(t_val)
    if spec.closed_form and spec.family is Family.STABLE:
        half = float(spec.alpha) / 2.0
        return t_val**half / special.gamma(half + 1.0)
    top = math.log(t_val)
    value, _ = integrate.quad(
        lambda s: float(potential_density(spec, math.exp(s))) * math.exp(s), top - 60.0, top, epsrel=1e-8, limit=200
    )
    return value
