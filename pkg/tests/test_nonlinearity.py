import math

import numpy as np
import pytest

from modules.bernstein import BernsteinSpec
from modules.errors import ConditionError, DomainError, InvalidNonlinearityError
from modules.nonlinearity import (
    Nonlinearity,
    Verdict,
    big_F,
    check_F,
    dyadic_verdict,
    ko_checks,
    ko_psi,
    ko_varphi,
    load_nonlinearity,
    nonlinearity_from_dict,
    nonlinearity_to_dict,
    transform_diagnostics,
)
from modules.utils import write_json

P_GRID = [1.1 + 0.2 * k for k in range(10)]


@pytest.mark.parametrize(
    "nl, m, M",
    [
        (Nonlinearity.power(1.75), 0.75, 0.75),
        (Nonlinearity.power_log(2.0, 1.0), 1.0, 2.0),
    ],
    ids=["power", "power_log"],
)
def test_check_F(nl, m, M):
    # Act
    constants = check_F(nl)
    # Assert
    assert constants.holds
    assert m - 1e-9 <= constants.m <= constants.M <= M + 1e-9


def test_check_F_rejects_nonpositive_f():
    nl = Nonlinearity.custom(lambda x: x * x - 1.0, lambda x: 2.0 * x)

    with pytest.raises(InvalidNonlinearityError):
        check_F(nl)


def test_check_F_flags_sublinear_part():
    nl = Nonlinearity.custom(lambda x: math.sqrt(x) + x**2, lambda x: 0.5 / math.sqrt(x) + 2.0 * x, label="sqrt+t^2")

    constants = check_F(nl)

    assert not constants.holds
    assert "not positive" in constants.reason


def test_negative_argument_is_invalid():
    with pytest.raises(InvalidNonlinearityError):
        Nonlinearity.power(2.0).value(-1.0)


@pytest.mark.parametrize("p", [0.5, 1.0], ids=["sublinear", "linear"])
def test_power_needs_superlinear_exponent(p):
    with pytest.raises(ValueError):
        Nonlinearity.power(p)


def test_big_F_quadrature_matches_power():
    power = Nonlinearity.power(2.5)
    custom = Nonlinearity.custom(lambda x: x**2.5, lambda x: 2.5 * x**1.5)

    for x in (0.3, 1.0, 40.0):
        assert big_F(custom, x) == pytest.approx(big_F(power, x), rel=1e-9)


def test_varphi_and_psi_are_inverse():
    nl = Nonlinearity.power_log(1.5, 1.0)

    for x in (0.01, 1.0, 100.0):
        assert ko_psi(nl, ko_varphi(nl, x)) == pytest.approx(x, rel=1e-8)


def test_varphi_quadrature_matches_power():
    custom = Nonlinearity.custom(lambda x: x**3, lambda x: 3 * x**2)

    assert ko_varphi(custom, 2.0) == pytest.approx(ko_varphi(Nonlinearity.power(3.0), 2.0), rel=1e-8)


def test_varphi_rejects_zero_and_nonpositive():
    with pytest.raises(ConditionError):
        ko_varphi(Nonlinearity.zero(), 1.0)
    with pytest.raises(DomainError):
        ko_varphi(Nonlinearity.power(2.0), 0.0)


@pytest.mark.parametrize(
    "blocks, verdict",
    [
        ([1.0, 0.5, 0.25, 0.125, 0.0625], Verdict.HOLDS),
        ([1.0, 1.0, 1.0, 1.0, 1.0], Verdict.INCONCLUSIVE),
        ([1.0, 2.0, 4.0, 8.0, 16.0], Verdict.FAILS),
        ([0.0, 1.0, 1.0, 1.0, 1.0], Verdict.INCONCLUSIVE),
    ],
    ids=["shrinking", "flat", "growing", "empty_start"],
)
def test_dyadic_verdict(blocks, verdict):
    assert dyadic_verdict(blocks)[0] is verdict


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5], ids=["alpha_0.5", "alpha_1", "alpha_1.5"])
def test_ko_classification(alpha):
    # Arrange
    spec = BernsteinSpec.stable(alpha)
    ko_threshold = 1.0 + alpha / 2.0
    integrability_threshold = 2.0 / (2.0 - alpha)
    ps = [p for p in P_GRID if abs(p - ko_threshold) >= 0.1 and abs(p - integrability_threshold) >= 0.1]
    # Act
    reports = {p: ko_checks(Nonlinearity.power(p), spec) for p in ps}
    # Assert
    for p, report in reports.items():
        assert (report.ko1.verdict is Verdict.HOLDS) == (p > ko_threshold), p
        assert (report.ko1.verdict is Verdict.FAILS) == (p < ko_threshold), p
        assert (report.integrability.verdict is Verdict.HOLDS) == (p < integrability_threshold), p
        assert (report.integrability.verdict is Verdict.FAILS) == (p > integrability_threshold), p


def test_ko_reference_case_passes():
    report = ko_checks(Nonlinearity.power(1.75), BernsteinSpec.stable(1.0))

    assert report.passed
    assert report.ko2.ratio_sup is not None and math.isfinite(report.ko2.ratio_sup)
    assert report.integrability.value > 0


def test_ko_failure_message(caplog):
    report = ko_checks(Nonlinearity.power(1.2), BernsteinSpec.stable(1.0))

    assert "KO1 fails" in report.failures()
    assert "KO1 fails for stable(1), t^1.2" in caplog.text


def test_ko_checks_need_scaling_certificate():
    with pytest.raises(ConditionError):
        ko_checks(Nonlinearity.power(2.0), BernsteinSpec.identity())


def test_transform_diagnostics_power_log():
    diagnostics = transform_diagnostics(Nonlinearity.power_log(2.0, 0.5), np.array([0.01, 0.1, 1.0, 10.0, 100.0]))

    assert diagnostics.varphi_within_bound
    assert diagnostics.varphi_derivative_within
    assert diagnostics.psi_derivative_within
    assert all(math.isfinite(v) for v in diagnostics.psi_second.values)


def test_nonlinearity_serialization(tmp_path):
    nl = Nonlinearity.power_log(2.0, 0.5)
    path = write_json(tmp_path / "f.json", nonlinearity_to_dict(nl))

    assert load_nonlinearity(path) == nl
    with pytest.raises(DomainError):
        nonlinearity_from_dict({"family": "custom"})
