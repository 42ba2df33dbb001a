import math

import numpy as np
import pytest

from modules.bernstein import BernsteinSpec
from modules.domain import BoxDomain
from modules.errors import DomainError
from modules.nonlinearity import Nonlinearity
from modules.regularity import (
    SUITES,
    apply_phi_rd,
    dyadic_pairs,
    fractional_check,
    gaussian_oracle,
    holder_seminorm,
    interior_holder_check,
    interior_pairs,
    lemma_ratio_suite,
    smooth_bump,
)
from modules.semilinear import SolverOptions, solve_moderate


@pytest.mark.parametrize("d", [1, 2, 3], ids=["d1", "d2", "d3"])
def test_oracle_of_laplacian(d):
    # −Δ e^{−|x|²} = 2d at the origin
    assert gaussian_oracle(BernsteinSpec.identity(), d) == pytest.approx(2.0 * d, rel=1e-9)


def test_fractional_check_stable():
    check = fractional_check(BernsteinSpec.stable(1.0), d=3)

    assert check.oracle == pytest.approx(4.0 / math.sqrt(math.pi), rel=1e-9)
    assert check.passed
    assert check.rows()[0][:2] == ["stable(1)", 3]


def test_free_space_operator_needs_jumps():
    with pytest.raises(DomainError):
        apply_phi_rd(BernsteinSpec.identity(), 1, smooth_bump(), [0.0])


def test_holder_seminorm_of_linear_function():
    pairs = dyadic_pairs(2, np.random.default_rng(0), levels=5)

    def linear(points):
        return 3.0 * np.atleast_2d(points)[:, 0]

    lipschitz = holder_seminorm(linear, pairs, 0, 1.0)
    gradient = holder_seminorm(linear, pairs, 1, 0.5)

    assert lipschitz.seminorm == pytest.approx(3.0, rel=1e-9)
    assert lipschitz.pairs == 5 * 4
    assert gradient.seminorm == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize(
    "k, alpha",
    [(3, 0.5), (0, 0.0), (1, 1.5)],
    ids=["order_too_high", "zero_exponent", "exponent_above_one"],
)
def test_holder_seminorm_rejects_arguments(k, alpha):
    pairs = dyadic_pairs(1, np.random.default_rng(0), levels=2)

    with pytest.raises(DomainError):
        holder_seminorm(smooth_bump(), pairs, k, alpha)


def test_interior_pairs_stay_in_the_compact():
    domain = BoxDomain.unit_cube(2)

    pairs = interior_pairs(domain, np.random.default_rng(1), delta=0.25)

    for points in pairs:
        assert np.all(points >= 0.25 - 1e-12) and np.all(points <= 0.75 + 1e-12)
    with pytest.raises(DomainError):
        interior_pairs(domain, np.random.default_rng(1), delta=0.5)


@pytest.mark.parametrize(
    "suite, alpha, two_delta2, skipped",
    [
        ("reg0", 0.8, 1.0, True),
        ("reg0", 0.8, 0.3, False),
        ("reg1", 0.5, 1.0, False),
        ("reg2", 0.5, 1.8, False),
        ("reg2", 0.5, 1.0, True),
    ],
    ids=["reg0_violated", "reg0_holds", "reg1_holds", "reg2_holds", "reg2_violated"],
)
def test_suite_hypotheses(suite, alpha, two_delta2, skipped):
    assert bool(SUITES[suite].hypothesis(alpha, two_delta2)) is skipped


def test_suite_skips_when_hypothesis_fails(caplog):
    report = lemma_ratio_suite(BernsteinSpec.stable(1.0), "reg0", alpha=0.8)

    assert report.skipped
    assert not report.passed
    assert "hypothesis violated" in report.reason
    assert "skipping reg0 for stable(1)" in caplog.text


def test_unknown_suite():
    with pytest.raises(DomainError):
        lemma_ratio_suite(BernsteinSpec.stable(0.3), "reg3")


def test_reg0_ratios_are_scale_invariant():
    report = lemma_ratio_suite(BernsteinSpec.stable(0.3), "reg0", alpha=0.8, d=1)

    assert report.passed
    assert set(report.spreads) == {"bump", "shifted_bump", "zero"}
    assert len(report.csv_rows()) == 3 * 4


def test_interior_holder_check():
    opts = SolverOptions(cutoff=8, nodes_per_half=12, residuals=False)
    solution = solve_moderate(1, Nonlinearity.power(1.75), BernsteinSpec.stable(1.0), BoxDomain.unit_cube(2), opts)

    report = interior_holder_check(solution, opts)

    assert report.finite
    assert (report.order, report.exponent) == (0, pytest.approx(0.9))
    assert report.fine_nodes == 24
    assert len(report.rows()) == 2
