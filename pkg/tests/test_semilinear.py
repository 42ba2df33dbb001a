import dataclasses
import logging
import math
from types import SimpleNamespace

import numpy as np
import pytest

from modules.bernstein import BernsteinSpec
from modules.domain import BoxDomain
from modules.errors import ConditionError, DomainError, GridMismatchError, NonConvergenceError
from modules.nonlinearity import Nonlinearity, constants
from modules.operators import Grid
from modules.semilinear import (
    SHELL_WIDTHS,
    SUPERSOLUTION_SAFETY,
    SolverOptions,
    boundary_profile_U,
    build_ladder,
    build_supersolution,
    domination_check,
    large_extrapolate,
    ratio_gap,
    solve_moderate,
)

SQUARE = BoxDomain.unit_cube(2)
STABLE = BernsteinSpec.stable(1.0)
POWER = Nonlinearity.power(1.75)
SMALL = SolverOptions(cutoff=8, nodes_per_half=12, residuals=False)


@pytest.fixture(scope="module")
def ladder():
    return build_ladder(3, POWER, STABLE, SQUARE, SMALL)


def test_zero_nonlinearity_gives_multiple_of_poisson_sigma():
    solution = solve_moderate(2, Nonlinearity.zero(), STABLE, SQUARE, SMALL)

    assert solution.iterations == 1
    assert np.allclose(solution.values, 2 * solution.poisson)


@pytest.mark.parametrize("j", [0, -3], ids=["zero", "negative"])
def test_boundary_multiplier_must_be_positive(j):
    with pytest.raises(DomainError):
        solve_moderate(j, POWER, STABLE, SQUARE, SMALL)


def test_nonlinearity_must_satisfy_F_condition():
    nl = Nonlinearity.custom(lambda x: math.sqrt(x) + x**2, lambda x: 0.5 / math.sqrt(x) + 2.0 * x, label="sqrt+t^2")

    with pytest.raises(ConditionError):
        solve_moderate(1, nl, STABLE, SQUARE, SMALL)


def test_non_convergence_keeps_history():
    opts = SMALL.model_copy(update={"k_max": 2, "tol": 1e-30})

    with pytest.raises(NonConvergenceError) as error:
        solve_moderate(1, POWER, STABLE, SQUARE, opts)

    assert len(error.value.history) == 2
    assert "last_step" in error.value.diagnostics


def test_moderate_solution_stays_between_zero_and_boundary_data(ladder):
    solution = ladder.solutions[1]

    assert solution.j == 2
    assert solution.iterations > 1
    assert solution.history[-1] < SMALL.tol
    assert np.all(solution.values >= 0)
    assert np.all(solution.values <= 2 * solution.poisson)
    # f(u) > 0 pulls the solution strictly below j Pσ in the interior
    assert solution.values[12, 12] < 2 * solution.poisson[12, 12]


def test_boundary_ratio_approaches_j(ladder):
    profile = ladder.solutions[2].boundary_profile

    assert {row.face for row in profile} == {"x1-", "x1+", "x2-", "x2+"}
    assert ratio_gap(profile, 3, 0.02) < ratio_gap(profile, 3, 0.2)
    with pytest.raises(DomainError):
        ratio_gap(profile, 3, 0.3)


def test_ladder_is_monotone(ladder):
    summary = ladder.summary()

    assert ladder.J == 3
    assert ladder.monotone
    assert ladder.within_bounds
    assert len(ladder.cauchy_gaps) == 2
    assert summary["iterations"] == [s.iterations for s in ladder.solutions]


def test_ladder_length_must_be_positive():
    with pytest.raises(DomainError):
        build_ladder(0, POWER, STABLE, SQUARE, SMALL)


def test_domination_check(ladder):
    top = ladder.solutions[-1].values
    dominating = SimpleNamespace(grid=ladder.grid, values=2.0 * top + 1.0)
    dominated = SimpleNamespace(grid=ladder.grid, values=0.5 * top + 1e-12)

    assert domination_check(ladder, dominating).passed
    assert not domination_check(ladder, dominated).passed
    with pytest.raises(GridMismatchError):
        domination_check(ladder, SimpleNamespace(grid=Grid(SQUARE, 8), values=top))


def test_large_extrapolate(ladder):
    report = large_extrapolate(ladder)

    assert report.J == 3
    assert report.cauchy_gap == ladder.cauchy_gaps[-1]
    assert len(report.blowup_min_ratio) == 3
    assert report.blowup_nondecreasing
    assert report.minimal_below_supersolution is None


def test_boundary_profile_blows_up():
    profile = boundary_profile_U(POWER, STABLE)

    values = profile(np.array([0.01, 0.05, 0.2]))

    assert np.all(np.diff(values) < 0)


def test_supersolution_needs_scaling():
    with pytest.raises(ConditionError):
        build_supersolution(POWER, BernsteinSpec.identity(), SQUARE, SMALL)


@pytest.fixture(scope="module")
def supersolution():
    return build_supersolution(POWER, STABLE, SQUARE, SMALL)


@pytest.mark.parametrize("index", [0, 2], ids=["u_1", "u_3"])
def test_moderate_solution_is_strictly_inside_order_interval(ladder, index):
    solution = ladder.solutions[index]
    inner = solution.grid.distance_tensor() >= 0.1
    target = solution.j * solution.poisson

    assert np.all(solution.correction >= 0)
    assert np.all(solution.values[inner] > 0)
    assert np.all(solution.values[inner] < target[inner])


def test_moderate_solution_is_a_fixed_point(ladder):
    solution = ladder.solutions[-1]
    inner = solution.grid.distance_tensor() >= 0.1

    gap = np.abs(solution.values - (solution.j * solution.poisson - solution.correction)) / (1.0 + solution.poisson)

    assert float(np.max(gap[inner])) < 1e-5


def test_off_grid_evaluation_matches_grid_values(ladder):
    solution = ladder.solutions[0]
    inner = solution.grid.distance_tensor().reshape(-1) >= 0.1
    nodes = solution.grid.points()[inner][::7]

    values = solution.evaluate(nodes)

    assert np.allclose(values, solution.values.reshape(-1)[inner][::7], rtol=1e-5)


def test_blowup_grows_linearly_with_j(ladder):
    report = large_extrapolate(ladder)

    assert report.blowup_linear
    assert report.blowup_min_ratio[-1] > report.blowup_min_ratio[0]


def test_interior_residuals_are_small():
    # Arrange
    opts = SMALL.model_copy(update={"nodes_per_half": 16, "check_points": 2, "residuals": True})
    # Act
    solution = solve_moderate(1, POWER, STABLE, SQUARE, opts)
    # Assert
    assert len(solution.residuals) == 2
    assert all(math.isfinite(r.value) for r in solution.residuals)
    assert solution.residual_scale > 0
    assert solution.residual_interior < 0.1 * solution.residual_scale
    assert dataclasses.replace(solution, residual_tolerance=0.1).residual_ok
    assert not dataclasses.replace(solution, residual_tolerance=0.0).residual_ok


def test_ladder_summary_reports_residual_verdicts(ladder):
    summary = ladder.summary()

    # residuals are off in SMALL, so the check is vacuous
    assert summary["residual_ok"] == [True, True, True]
    assert summary["residual_scale"] == [0.0, 0.0, 0.0]


def test_supersolution_constants(supersolution):
    m, _ = constants(POWER)

    assert supersolution.C >= 1.0
    # every boundary-layer point lies in the widest shell
    assert supersolution.c_by_eta[max(SHELL_WIDTHS)] == pytest.approx(max(1.0, supersolution.max_defect))
    assert supersolution.eta in SHELL_WIDTHS
    assert 1.0 + SUPERSOLUTION_SAFETY == pytest.approx(2.1)
    assert supersolution.lam == pytest.approx((1.0 + SUPERSOLUTION_SAFETY) * supersolution.C ** (1.0 / m))
    assert supersolution.mu >= 0
    assert supersolution.residuals.shape == (20,)
    assert supersolution.holds == bool(np.all(supersolution.residuals >= 0))
    assert supersolution.summary()["max_defect"] == supersolution.max_defect


def test_supersolution_blows_up_faster_than_poisson_sigma(supersolution):
    assert supersolution.blowup_factor() > 1.0


def test_ladder_is_dominated_by_supersolution(ladder, supersolution):
    report = domination_check(ladder, supersolution)

    assert report.passed
    assert len(report.per_j) == 3


def test_supersolution_logs_clamped_defect(mocker, caplog):
    # Arrange
    mocker.patch("modules.semilinear.apply_pointwise", return_value=-0.0)
    caplog.set_level(logging.INFO, logger="modules.semilinear")
    # Act
    result = build_supersolution(POWER, STABLE, SQUARE, SMALL)
    # Assert
    assert result.C == 1.0
    assert result.max_defect == 0.0
    assert "largest defect 0" in caplog.text
    assert "C is clamped to 1" in caplog.text
