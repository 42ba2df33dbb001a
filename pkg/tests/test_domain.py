import math

import numpy as np
import pytest

from modules.domain import (
    BoxDomain,
    EigenBasis,
    boundary_distance,
    eigen_enumerate,
    face_normal_points,
    first_eigenfunction_table,
    load_domain,
    weyl_check,
)
from modules.errors import DomainError
from modules.utils import write_json


@pytest.mark.parametrize(
    "kwargs",
    [{"d": 4, "sides": (1.0,) * 4}, {"d": 2, "sides": (1.0,)}, {"d": 2, "sides": (1.0, 0.0)}],
    ids=["too_many_dimensions", "missing_side", "zero_side"],
)
def test_invalid_boxes(kwargs):
    with pytest.raises(ValueError):
        BoxDomain(**kwargs)


def test_load_domain(tmp_path):
    path = write_json(tmp_path / "box.json", {"d": 2, "sides": [1.0, 2.0]})

    domain = load_domain(path)

    assert domain == BoxDomain(d=2, sides=(1.0, 2.0))
    assert domain.volume == 2.0
    assert np.allclose(domain.center, [0.5, 1.0])


@pytest.mark.parametrize(
    "point, expected",
    [
        ([0.5, 0.5, 0.5], 0.5),
        ([0.1, 0.5, 0.95], 0.05),
        ([0.0, 0.3, 0.3], 0.0),
    ],
    ids=["center", "near_face", "on_boundary"],
)
def test_boundary_distance(point, expected):
    assert boundary_distance(BoxDomain.unit_cube(), point) == pytest.approx(expected)


def test_boundary_distance_rejects_outside_points():
    with pytest.raises(DomainError):
        boundary_distance(BoxDomain.unit_cube(), [1.2, 0.5, 0.5])
    with pytest.raises(DomainError):
        boundary_distance(BoxDomain.unit_cube(), [0.5, 0.5])


def test_face_normal_points():
    domain = BoxDomain(d=2, sides=(1.0, 2.0))

    samples = face_normal_points(domain, (0.1,), offsets=(0.0, 0.1))

    assert len(samples) == 8
    assert {s.face for s in samples} == {"x1-", "x1+", "x2-", "x2+"}
    for sample in samples:
        assert boundary_distance(domain, sample.point) == pytest.approx(0.1)


def test_eigen_enumeration_order():
    pairs = eigen_enumerate(BoxDomain.unit_cube(), 3)

    assert pairs[0].index == (1, 1, 1)
    assert pairs[0].eigenvalue == pytest.approx(3 * math.pi**2)
    # the threefold degenerate level is ordered lexicographically
    assert [p.index for p in pairs[1:4]] == [(1, 1, 2), (1, 2, 1), (2, 1, 1)]
    assert all(a.eigenvalue <= b.eigenvalue for a, b in zip(pairs, pairs[1:]))


def test_eigenfunctions_are_orthonormal():
    # Arrange
    domain = BoxDomain(d=2, sides=(1.0, 2.0))
    basis = EigenBasis(domain, 4)
    nodes, weights = np.polynomial.legendre.leggauss(40)
    xs = [(nodes + 1) * side / 2 for side in domain.sides]
    ws = [weights * side / 2 for side in domain.sides]
    # Act
    gram = [
        np.einsum("ap,bp,p->ab", basis.axis_functions(axis, xs[axis]), basis.axis_functions(axis, xs[axis]), ws[axis])
        for axis in range(2)
    ]
    # Assert
    for matrix in gram:
        assert np.allclose(matrix, np.eye(4), atol=1e-12)


def test_evaluate_matches_eigenfunction():
    basis = EigenBasis(BoxDomain.unit_cube(), 3)
    coefficients = np.zeros(basis.shape)
    coefficients[0, 1, 2] = 2.0
    points = np.array([[0.2, 0.3, 0.4], [0.7, 0.1, 0.9]])

    values = basis.evaluate(coefficients, points)

    assert np.allclose(values, 2.0 * basis.eigenfunction((1, 2, 3), points))
    assert basis.eigenvalue((1, 2, 3)) == pytest.approx(14 * math.pi**2)


def test_sorted_and_tensor_views_are_inverse():
    basis = EigenBasis(BoxDomain(d=2, sides=(1.0, 3.0)), 5)
    tensor = np.arange(25.0).reshape(5, 5)

    assert np.array_equal(basis.tensor_from_sorted(basis.sorted_from_tensor(tensor)), tensor)


def test_weyl_ratios_bounded():
    table = weyl_check(BoxDomain.unit_cube(), [1, 10, 100, 1000])

    assert table.bounded(10.0)
    # λ_j j^{-2/3} → (6π²)^{2/3} ≈ 15.2, and λ_1 = 3π²
    assert 5.0 < table.vmin < table.vmax < 60.0


def test_first_eigenfunction_comparable_to_distance():
    table = first_eigenfunction_table(BoxDomain.unit_cube())

    assert table.bounded(10.0)
