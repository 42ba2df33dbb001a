import math

import numpy as np
import pytest
from scipy import special

from modules.bernstein import (
    BernsteinSpec,
    Family,
    bernstein_report,
    check_spec_invariants,
    conjugate,
    default_certificate,
    derivative_ratio_check,
    global_scaling_check,
    jump_kernel,
    jump_kernel_moment,
    jump_sharp_table,
    levy_density,
    levy_tail,
    phi_derivative,
    phi_eval,
    phi_inverse,
    potential_density,
    renewal_proxy,
    spec_from_dict,
    spec_to_dict,
    stable_kernel_constant,
)
from modules.errors import DomainError
from modules.utils import log_grid

FAMILIES = [
    BernsteinSpec.stable(0.5),
    BernsteinSpec.sum_of_stables([1.0, 0.5], [0.25, 0.75]),
    BernsteinSpec.tempered_stable(1.0, 2.0),
    BernsteinSpec.relativistic(1.5, 1.0),
]
FAMILY_IDS = ["stable", "sum_of_stables", "tempered_stable", "relativistic"]


@pytest.mark.parametrize(
    "spec, lam, expected",
    [
        (BernsteinSpec.stable(1.0), 4.0, 2.0),  # λ^{1/2}
        (BernsteinSpec.sum_of_stables([2.0, 1.0], [0.5, 0.25]), 16.0, 2.0 * 4.0 + 2.0),
        (BernsteinSpec.tempered_stable(1.0, 1.0), 3.0, 1.0),  # (3+1)^{1/2} − 1
        (BernsteinSpec.relativistic(1.0, 2.0), 5.0, 1.0),  # (5+4)^{1/2} − 2
        (BernsteinSpec.identity(), 7.0, 7.0),
    ],
    ids=["stable", "sum_of_stables", "tempered", "relativistic", "identity"],
)
def test_phi_eval(spec, lam, expected):
    # Act
    result = phi_eval(spec, lam)
    # Assert
    assert result == pytest.approx(expected, rel=1e-14)


def test_phi_eval_keeps_shape_and_rejects_nonpositive():
    spec = BernsteinSpec.stable(1.0)

    assert np.asarray(phi_eval(spec, np.ones((2, 3)))).shape == (2, 3)
    with pytest.raises(DomainError):
        phi_eval(spec, 0.0)
    with pytest.raises(DomainError):
        phi_eval(spec, np.array([1.0, -1.0]))


def test_tempered_phi_has_no_cancellation_at_small_lambda():
    spec = BernsteinSpec.tempered_stable(1.0, 1.0)

    # φ(λ) ≈ φ′(0) λ = λ/2 for tiny λ
    assert phi_eval(spec, 1e-14) == pytest.approx(0.5e-14, rel=1e-8)


@pytest.mark.parametrize(
    "family, kwargs",
    [
        (Family.STABLE, {"alpha": 2.0}),
        (Family.TEMPERED_STABLE, {"alpha": 1.0}),
        (Family.RELATIVISTIC, {"alpha": 1.0, "mass": 0.0}),
        (Family.SUM_OF_STABLES, {"weights": (1.0,), "exponents": (1.0,)}),
        (Family.CONJUGATE, {}),
    ],
    ids=["alpha_out_of_range", "missing_theta", "zero_mass", "exponent_one", "conjugate_without_base"],
)
def test_invalid_specs(family, kwargs):
    with pytest.raises(ValueError):
        BernsteinSpec(family=family, **kwargs)


@pytest.mark.parametrize("spec", FAMILIES, ids=FAMILY_IDS)
def test_conjugation_identity(spec):
    # Arrange
    lams = log_grid(1e-3, 1e6, 46)
    # Act
    product = np.asarray(phi_eval(spec, lams)) * np.asarray(phi_eval(conjugate(spec), lams))
    # Assert
    assert np.max(np.abs(product / lams - 1.0)) < 1e-10


def test_conjugate_of_conjugate_is_base():
    spec = BernsteinSpec.tempered_stable(1.0, 2.0)

    assert conjugate(conjugate(spec)) == spec
    assert conjugate(BernsteinSpec.stable(0.5)).alpha == 1.5


@pytest.mark.parametrize("spec", FAMILIES, ids=FAMILY_IDS)
def test_derivative_matches_finite_differences(spec):
    lam = np.array([0.01, 1.0, 100.0])
    h = 1e-6 * lam

    slope = (np.asarray(phi_eval(spec, lam + h)) - np.asarray(phi_eval(spec, lam - h))) / (2 * h)

    assert np.allclose(phi_derivative(spec, lam), slope, rtol=1e-6)


@pytest.mark.parametrize("spec", FAMILIES, ids=FAMILY_IDS)
def test_phi_inverse(spec):
    for y in (1e-3, 1.0, 50.0):
        assert phi_eval(spec, phi_inverse(spec, y)) == pytest.approx(y, rel=1e-10)


def test_phi_inverse_rejects_nonpositive():
    with pytest.raises(DomainError):
        phi_inverse(BernsteinSpec.stable(1.0), 0.0)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5], ids=["alpha_0.5", "alpha_1", "alpha_1.5"])
def test_potential_density_inversion_matches_closed_form(alpha):
    # Arrange
    spec = BernsteinSpec.stable(alpha)
    ts = log_grid(0.1, 10.0, 7)
    # Act
    inverted = np.asarray(potential_density(spec.generic(), ts))
    exact = np.asarray(potential_density(spec, ts))
    # Assert
    assert np.max(np.abs(inverted / exact - 1.0)) < 1e-6
    assert np.allclose(exact, ts ** (alpha / 2 - 1) / special.gamma(alpha / 2))


def test_levy_tail_inversion_matches_closed_form():
    spec = BernsteinSpec.stable(1.0)
    ts = np.array([0.2, 1.0, 5.0])

    inverted = np.asarray(levy_tail(spec.generic(), ts))

    assert np.allclose(inverted, ts**-0.5 / math.sqrt(math.pi), rtol=1e-6)


def test_tempered_levy_tail_integrates_the_density():
    spec = BernsteinSpec.tempered_stable(1.0, 2.0)
    a, b = 0.5, 1.5
    s = np.linspace(a, b, 2001)
    density = np.asarray(levy_density(spec, s))

    mass = float(np.sum((density[1:] + density[:-1]) / 2 * np.diff(s)))

    assert levy_tail(spec, a) - levy_tail(spec, b) == pytest.approx(mass, rel=1e-6)


def test_identity_has_no_jumps():
    spec = BernsteinSpec.identity()

    assert levy_density(spec, 1.0) == 0.0
    assert levy_tail(spec, 1.0) == 0.0
    assert jump_kernel(spec, 3, 0.5) == 0.0
    assert potential_density(spec, 2.0) == 1.0


@pytest.mark.parametrize("d", [1, 2, 3], ids=["d1", "d2", "d3"])
def test_jump_kernel_quadrature_matches_stable_closed_form(d):
    spec = BernsteinSpec.stable(1.0)
    rs = np.array([0.05, 0.5, 2.0])

    numeric = np.asarray(jump_kernel(spec, d, rs))

    assert np.allclose(numeric, stable_kernel_constant(d, 1.0) * rs ** (-d - 1.0), rtol=1e-6)


def test_jump_kernel_moment_closed_form():
    spec = BernsteinSpec.stable(1.0)

    moment = jump_kernel_moment(spec, 3, 0.0, 0.1, 4.0)

    # ∫_0^0.1 r^4 A r^{-4} dr
    assert moment == pytest.approx(stable_kernel_constant(3, 1.0) * 0.1)


def test_sharp_jump_kernel_table_is_bounded():
    spec = BernsteinSpec.tempered_stable(1.0, 1.0)

    table = jump_sharp_table(spec, 3, log_grid(0.01, 1.0, 9))

    assert table.bounded(10.0)


@pytest.mark.parametrize(
    "spec, delta1, delta2",
    [
        (BernsteinSpec.stable(1.0), 0.5, 0.5),
        (BernsteinSpec.sum_of_stables([1.0, 1.0], [0.25, 0.75]), 0.25, 0.75),
    ],
    ids=["stable", "sum_of_stables"],
)
def test_scaling_certificate(spec, delta1, delta2):
    # Act
    certificate = default_certificate(spec)
    # Assert
    assert certificate.holds
    assert delta1 - 1e-9 <= certificate.delta1 <= certificate.delta2 <= delta2 + 1e-9
    assert certificate.sandwich_holds(spec, [1.0, 10.0, 1e3], [2.0, 50.0])


def test_scaling_certificate_fails_for_identity(caplog):
    certificate = default_certificate(BernsteinSpec.identity())

    assert not certificate.holds
    assert "outside 0 < delta1 <= delta2 < 1" in certificate.reason
    assert "scaling certificate fails" in caplog.text


@pytest.mark.parametrize("spec", FAMILIES, ids=FAMILY_IDS)
def test_invariants_and_global_scaling(spec):
    invariants = check_spec_invariants(spec)

    assert invariants.vanishes_at_zero and invariants.increasing and invariants.concave
    assert global_scaling_check(spec, np.random.default_rng(0))


def test_renewal_proxy_increasing():
    proxy = renewal_proxy(BernsteinSpec.relativistic(1.0, 1.0))

    values = np.asarray(proxy(log_grid(1e-4, 1.0, 11)))

    assert np.all(np.diff(values) > 0)


def test_spec_serialization():
    spec = BernsteinSpec.sum_of_stables([1.0, 0.5], [0.25, 0.75])

    assert spec_from_dict(spec_to_dict(spec)) == spec
    assert spec_from_dict(spec_to_dict(conjugate(spec))) == conjugate(spec)
    with pytest.raises(DomainError):
        spec_to_dict(BernsteinSpec.custom(lambda s: s**-1.5))


def test_bernstein_report_for_stable():
    report = bernstein_report(BernsteinSpec.stable(1.0), d=3)

    assert report.passed
    assert report.conjugation_max_error < 1e-10
    assert {table.label for table in report.tables} >= {"j(r)r^d/phi(r^-2)", "mu(t)/mu(t+1)"}


def test_derivative_ratio_check():
    spec = BernsteinSpec.sum_of_stables([1.0, 1.0], [0.25, 0.75])

    table = derivative_ratio_check(spec, log_grid(1.0, 1e6, 13))

    assert 0.25 <= table.vmin <= table.vmax <= 0.75
    assert derivative_ratio_check(BernsteinSpec.stable(1.0), [4.0]).values[0] == pytest.approx(0.5, rel=1e-7)
    with pytest.raises(DomainError):
        derivative_ratio_check(spec, [0.5])
