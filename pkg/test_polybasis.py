#!/usr/bin/env python3
"""
Tests for the Hermite basis and the basis-evaluation counter
"""

import numpy as np
import pytest

from app.polybasis import BasisFamily, basis_counter, basis_matrix, eval_1d, eval_multi, hermite_table


def test_eval_1d_examples():
    family = BasisFamily()
    assert eval_1d(family, 0, 3.7) == 1.0
    assert eval_1d(family, 2, 1.0) == pytest.approx(0.0, abs=1e-14)
    assert eval_1d(family, 3, 0.5) == pytest.approx(-1.375)


def test_eval_1d_rejects_orders_above_family():
    with pytest.raises(ValueError):
        eval_1d(BasisFamily(max_order=3), 4, 0.0)


def test_hermite_derivatives():
    x = np.linspace(-2, 2, 7)
    table = hermite_table(x, 4)
    np.testing.assert_allclose(table[:, 4], x ** 4 - 6 * x ** 2 + 3)
    np.testing.assert_allclose(hermite_table(x, 4, 1)[:, 4], 4 * x ** 3 - 12 * x)
    np.testing.assert_allclose(hermite_table(x, 4, 2)[:, 4], 12 * x ** 2 - 12)


def test_eval_multi_examples():
    family = BasisFamily()
    value, grad = eval_multi(family, (0, 0), (2.0, -1.0))
    assert value == 1.0
    np.testing.assert_array_equal(grad, [0.0, 0.0])

    a, b = 0.7, -1.3
    value, grad = eval_multi(family, (1, 1), (a, b))
    assert value == pytest.approx(a * b)
    np.testing.assert_allclose(grad, [b, a])

    value, grad = eval_multi(family, (2, 1), (1.0, 2.0))
    assert value == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(grad, [4.0, 0.0], atol=1e-14)


def test_eval_multi_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        eval_multi(BasisFamily(), (1, 0), (1.0,))


def test_gradient_matches_finite_differences():
    family = BasisFamily()
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(100):
        alpha = tuple(rng.integers(0, 4, size=3))
        x = rng.uniform(-2.9, 2.9, size=3)
        _, grad = eval_multi(family, alpha, x)
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            fd = (eval_multi(family, alpha, x + e)[0] - eval_multi(family, alpha, x - e)[0]) / (2 * h)
            assert grad[j] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_tail_continuation_is_linear_and_continuous():
    family = BasisFamily(tail_bound=3.0)
    b = 3.0
    inside = family.table(np.array([b]), 4)[0]
    slope = family.table(np.array([b]), 4, deriv=1)[0]
    outside = family.table(np.array([b + 2.0]), 4)[0]
    np.testing.assert_allclose(outside, inside + 2.0 * slope)
    np.testing.assert_allclose(family.table(np.array([-10.0]), 4, deriv=1)[0],
                               family.table(np.array([-3.0]), 4, deriv=1)[0])
    np.testing.assert_array_equal(family.table(np.array([5.0]), 4, deriv=2)[0], np.zeros(5))


def test_basis_matrix_shape_and_counter():
    family = BasisFamily()
    indices = np.array([[0, 0], [0, 1], [2, 1]])
    X = np.random.default_rng(1).standard_normal((10, 2))
    start = basis_counter.count
    Phi = basis_matrix(family, indices, X)
    assert Phi.shape == (10, 3)
    assert basis_counter.count - start == 30
    np.testing.assert_allclose(Phi[:, 2], (X[:, 0] ** 2 - 1) * X[:, 1])
    basis_matrix(family, indices, X, count=False)
    assert basis_counter.count - start == 30


def test_family_round_trip_and_validation():
    family = BasisFamily(max_order=4, tail_bound=2.5)
    assert BasisFamily.from_dict(family.to_dict()) == family
    with pytest.raises(ValueError):
        BasisFamily(kind="legendre")


if __name__ == "__main__":
    print("=" * 60)
    print("TESTING POLYNOMIAL BASIS")
    print("=" * 60)
    raise SystemExit(pytest.main([__file__, "-v"]))
