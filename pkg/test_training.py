#!/usr/bin/env python3
"""
Tests for the map objectives, the optimizer driver, ATM and the diagnostics
"""

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError
from scipy.integrate import quad

from app.errors import DegenerateSamplesError
from app.training import (
    FROM_DENSITY,
    FROM_SAMPLES,
    REGRESSION,
    TRACE_COLUMNS,
    AtmConfig,
    ComponentObjective,
    DensityObjective,
    atm_train,
    atm_train_from_density,
    atm_train_from_samples,
    atm_train_regression,
    compute_diagnostics,
    minimize,
    trace_diagnostic,
    variance_diagnostic,
)
from app.transport import ComposedMap, MapComponent, ReferenceDensity, TriangularMap


class ShiftedNormal:
    """Unnormalized N(delta, I) with an arbitrary additive constant."""

    def __init__(self, dim, delta=0.0, const=0.0):
        self.dim = dim
        self.delta = delta
        self.const = const

    def log_density(self, X):
        X = np.atleast_2d(X)
        return -0.5 * np.sum((X - self.delta) ** 2, axis=1) + self.const

    def grad_log_density(self, X):
        return -(np.atleast_2d(X) - self.delta)


class QuarticWell:
    """Unnormalized density exp(-x^2 / 2 - x^4 / 4)."""

    dim = 1

    def log_density(self, X):
        x = np.atleast_2d(X)[:, 0]
        return -0.5 * x ** 2 - 0.25 * x ** 4

    def grad_log_density(self, X):
        x = np.atleast_2d(X)[:, 0]
        return (-x - x ** 3)[:, None]


class Quadratic:
    def __init__(self, a):
        self.a = np.asarray(a, dtype=float)

    def value_grad(self, w):
        r = np.asarray(w) - self.a
        return 0.5 * float(r @ r), r


def _fd_check(objective, w, h=1e-6, rel=1e-5):
    _, grad = objective.value_grad(w)
    for i in range(w.size):
        e = np.zeros(w.size)
        e[i] = h
        fd = (objective.value(w + e) - objective.value(w - e)) / (2 * h)
        assert grad[i] == pytest.approx(fd, rel=rel, abs=1e-7)


def _random_component(k, rng, n_terms=4):
    comp = MapComponent.identity(k)
    while len(comp.index_set) < n_terms:
        comp = comp.with_index(comp.index_set.reduced_margin(max_order=3)[0])
    return comp.with_coeffs(comp.coeffs + 0.2 * rng.standard_normal(comp.coeffs.size))


# ----------------------------------------------------------------------
# Objectives
# ----------------------------------------------------------------------

def test_regression_objective_at_interpolating_component():
    X = np.random.default_rng(0).standard_normal((200, 2))
    comp = MapComponent.identity(2)
    objective = ComponentObjective(REGRESSION, comp, X, X[:, 1])
    value, grad = objective.value_grad(comp.coeffs)
    assert value == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(grad, 0.0, atol=1e-9)


def test_from_samples_objective_is_gaussian_entropy_at_identity():
    X = np.random.default_rng(1).standard_normal((20000, 1))
    objective = ComponentObjective(FROM_SAMPLES, MapComponent.identity(1), X)
    assert objective.value(MapComponent.identity(1).coeffs) == pytest.approx(0.5 * (1 + np.log(2 * np.pi)), abs=0.02)


def test_from_density_objective_at_identity():
    X = ReferenceDensity(1).antithetic_sample(20000, np.random.default_rng(2))
    tmap = TriangularMap.identity(1)
    objective = DensityObjective(tmap, ShiftedNormal(1), X)
    value, grad = objective.value_grad(objective.pack(tmap))
    assert value == pytest.approx(0.5, abs=0.02)
    np.testing.assert_allclose(grad, 0.0, atol=0.05)


@pytest.mark.parametrize("kind", [FROM_SAMPLES, REGRESSION])
def test_component_objective_gradients(kind):
    rng = np.random.default_rng(3)
    X = rng.standard_normal((300, 2))
    comp = _random_component(2, rng)
    targets = np.sin(X[:, 0]) + X[:, 1] if kind == REGRESSION else None
    _fd_check(ComponentObjective(kind, comp, X, targets), comp.coeffs)


def test_density_objective_gradient():
    rng = np.random.default_rng(4)
    tmap = TriangularMap((_random_component(1, rng), _random_component(2, rng)), direction="pushforward")
    X = rng.standard_normal((300, 2))
    objective = DensityObjective(tmap, ShiftedNormal(2, delta=0.4), X)
    _fd_check(objective, objective.pack(tmap))


def test_density_objective_needs_pushforward_map():
    with pytest.raises(ValueError):
        DensityObjective(TriangularMap.identity(1, direction="pullback"), ShiftedNormal(1), np.zeros((10, 1)))


# ----------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------

def test_minimize_quadratic():
    a = np.array([1.5, -2.0, 0.25])
    w, report = minimize(Quadratic(a), np.zeros(3), AtmConfig(gtol=1e-10))
    np.testing.assert_allclose(w, a, atol=1e-8)
    assert report.success and not report.warning


def test_minimize_regression_with_representable_target():
    X = np.random.default_rng(5).standard_normal((200, 1))
    objective = ComponentObjective(REGRESSION, MapComponent.identity(1), X, 0.5 + 2.0 * X[:, 0])
    w, report = minimize(objective, MapComponent.identity(1).coeffs, AtmConfig(gtol=1e-9))
    assert report.value < 1e-10
    assert objective.value(w) < 1e-10


# ----------------------------------------------------------------------
# ATM
# ----------------------------------------------------------------------

def test_from_density_shifted_gaussian():
    cfg = AtmConfig(max_terms=4, n_reference=2000, n_test=1000)
    result = atm_train_from_density(ShiftedNormal(1, delta=0.3), 1, cfg, rng=np.random.default_rng(6))
    assert result.map.evaluate(np.zeros((1, 1)))[0, 0] == pytest.approx(0.3, abs=1e-2)
    assert result.converged
    assert result.diagnostics.variance_diag < cfg.var_tol
    assert list(result.trace.columns) == TRACE_COLUMNS


def test_from_samples_on_standard_normal_stays_small():
    X = np.random.default_rng(7).standard_normal((5000, 1))
    result = atm_train_from_samples(X, AtmConfig())
    assert result.map.n_terms <= 3
    grid = np.linspace(-2, 2, 9)[:, None]
    U = result.map.standardize(grid)
    np.testing.assert_allclose(result.map.evaluate(grid)[:, 0], U[:, 0], atol=0.1)


def test_from_samples_on_scaled_gaussian_is_affine():
    X = 2.0 + 0.25 * np.random.default_rng(8).standard_normal((20000, 1))
    result = atm_train_from_samples(X, AtmConfig())
    assert result.map.n_terms <= 3
    grid = np.linspace(1.5, 2.5, 11)[:, None]
    affine = (grid[:, 0] - X.mean()) / X.std()
    np.testing.assert_allclose(result.map.evaluate(grid)[:, 0], affine, atol=1e-2)
    assert result.basis_evals > 0
    assert result.map.direction == "pullback"


def test_from_samples_trains_only_requested_components():
    rng = np.random.default_rng(9)
    theta = rng.standard_normal(2000)
    X = np.column_stack([theta, theta + rng.standard_normal(2000)])
    result = atm_train_from_samples(X, AtmConfig(max_terms=4), components=[2])
    first = result.map.components[0]
    assert len(first.index_set) == 2
    np.testing.assert_allclose(first.evaluate(np.array([[0.7]]))[0], [0.7], atol=1e-12)
    assert set(result.trace["component"]) == {2}


def test_from_samples_decomposes_over_components():
    rng = np.random.default_rng(17)
    theta = rng.standard_normal(3000)
    X = np.column_stack([theta, np.sin(theta) + 0.3 * rng.standard_normal(3000)])
    cfg = AtmConfig(max_terms=5)
    full = atm_train_from_samples(X, cfg)
    for k in (1, 2):
        alone = atm_train_from_samples(X, cfg, components=[k])
        assert alone.map.components[k - 1].index_set == full.map.components[k - 1].index_set
        np.testing.assert_allclose(alone.map.components[k - 1].coeffs, full.map.components[k - 1].coeffs)
    U = full.map.standardize(X)
    per_component = sum(
        ComponentObjective(FROM_SAMPLES, comp, U[:, :comp.k]).value(comp.coeffs) for comp in full.map.components
    )
    total = -np.mean(full.map.log_pullback(ReferenceDensity(2), X)) - np.sum(np.log(full.map.scale))
    assert total == pytest.approx(per_component, abs=1e-8)


def test_adaptation_never_increases_training_objective():
    rng = np.random.default_rng(18)
    X = rng.gamma(3.0, size=(3000, 1))
    trace = atm_train_from_samples(X, AtmConfig(max_terms=6, patience=10)).trace
    assert len(trace) > 1
    assert np.all(np.diff(trace["train_objective"]) <= 1e-10)

    target = QuarticWell()
    cfg = AtmConfig(max_terms=6, n_reference=2000, n_test=500, var_tol=1e-12, trace_tol=1e-12)
    trace = atm_train_from_density(target, 1, cfg, rng=np.random.default_rng(19)).trace
    assert len(trace) > 1
    assert np.all(np.diff(trace["train_objective"]) <= 1e-10)


def test_from_samples_keeps_best_validation_iterate():
    X = np.random.default_rng(20).gamma(2.0, size=(2000, 1))
    result = atm_train_from_samples(X, AtmConfig(max_terms=8))
    best = result.trace.loc[result.trace["validation_objective"].idxmin()]
    assert best["n_terms"] == len(result.map.components[0].index_set)


def test_trained_density_integrates_to_one():
    X = np.random.default_rng(21).gamma(4.0, size=(5000, 1))
    tmap = atm_train_from_samples(X, AtmConfig(max_terms=6)).map
    reference = ReferenceDensity(1)
    mean, std = X.mean(), X.std()
    total, _ = quad(lambda x: np.exp(tmap.log_pullback(reference, np.array([[x]]))[0]),
                    mean - 40 * std, mean + 40 * std, points=[mean - 3 * std, mean, mean + 3 * std], limit=400)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_from_samples_rejects_degenerate_columns():
    X = np.column_stack([np.random.default_rng(10).standard_normal(100), np.ones(100)])
    with pytest.raises(DegenerateSamplesError):
        atm_train_from_samples(X)


def test_regression_towards_identity_composition():
    X = ReferenceDensity(2).sample(1000, np.random.default_rng(11))
    composition = ComposedMap(tuple(TriangularMap.identity(2) for _ in range(3)))
    result = atm_train_regression(X, composition.transport(X), AtmConfig(max_terms=4))
    assert result.converged
    np.testing.assert_allclose(result.map.evaluate(X), X, atol=1e-6)


def test_regression_of_two_affine_maps():
    X = ReferenceDensity(1).sample(1000, np.random.default_rng(12))
    composition = ComposedMap((TriangularMap.affine([1.0], [[0.5]]), TriangularMap.affine([-2.0], [[3.0]])))
    result = atm_train_regression(X, composition.transport(X), AtmConfig(max_terms=4))
    assert result.converged
    residual = result.map.evaluate(X) - composition.transport(X)
    assert np.mean(residual ** 2) < 1e-8


def test_from_density_keeps_best_iterate_and_warns():
    cfg = AtmConfig(max_terms=3, n_reference=2000, n_test=500, var_tol=1e-12, trace_tol=1e-12)
    samples = ReferenceDensity(1).sample(500, np.random.default_rng(22))
    result = atm_train_from_density(QuarticWell(), 1, cfg, rng=np.random.default_rng(23), test_samples=samples)
    assert not result.converged
    assert any("without meeting the tolerances" in w for w in result.warnings)
    # either diagnostic may pass, so iterates are ranked by the smaller of the two
    row = result.trace.loc[np.minimum(result.trace["variance_diag"], result.trace["trace_diag"]).idxmin()]
    assert result.map.n_terms == row["n_terms"]
    assert result.diagnostics.variance_diag == pytest.approx(row["variance_diag"])
    assert compute_diagnostics(result.map, QuarticWell(), samples).variance_diag == pytest.approx(row["variance_diag"])


def test_from_density_both_rule_is_stricter():
    target = QuarticWell()
    cfg = AtmConfig(max_terms=6, n_reference=2000, n_test=1000, var_tol=1.0, trace_tol=1e-12)
    either = atm_train_from_density(target, 1, cfg, rng=np.random.default_rng(24))
    both = atm_train_from_density(target, 1, cfg, rng=np.random.default_rng(24), require_both=True)
    assert either.converged and not both.converged
    assert len(either.trace) == 1
    assert len(both.trace) > 1


def test_atm_train_dispatch():
    X = np.random.default_rng(13).standard_normal((500, 1))
    assert atm_train(FROM_SAMPLES, AtmConfig(max_terms=3), X=X).map.dim == 1
    assert atm_train(REGRESSION, AtmConfig(max_terms=3), X=X, Z=X).converged
    result = atm_train(FROM_DENSITY, AtmConfig(max_terms=3, n_reference=500, n_test=200),
                       target=ShiftedNormal(1), dim=1)
    assert isinstance(result.trace, pd.DataFrame)
    with pytest.raises(ValueError):
        atm_train("maximum_likelihood", X=X)


def test_atm_config_validation():
    with pytest.raises(ValidationError):
        AtmConfig(max_terms=0)
    with pytest.raises(ValidationError):
        AtmConfig(unknown_field=1)
    assert AtmConfig().trace_tol == pytest.approx(10 ** -2.5)


# ----------------------------------------------------------------------
# Diagnostics
# ----------------------------------------------------------------------

def test_diagnostics_vanish_for_exact_map():
    identity = TriangularMap.identity(2)
    target = ShiftedNormal(2, const=5.0)
    rng = np.random.default_rng(14)
    assert variance_diagnostic(identity, target, n_test=1000, rng=rng) == pytest.approx(0.0, abs=1e-12)
    assert trace_diagnostic(identity, target, n_test=1000, rng=rng) == pytest.approx(0.0, abs=1e-12)


def test_diagnostics_for_shifted_target():
    identity = TriangularMap.identity(1)
    samples = ReferenceDensity(1).sample(10000, np.random.default_rng(15))
    delta = 0.1
    var = variance_diagnostic(identity, ShiftedNormal(1, delta), samples=samples)
    assert var == pytest.approx(delta ** 2 / 2, rel=0.1)
    trace = trace_diagnostic(identity, ShiftedNormal(1, delta), samples=samples)
    assert trace == pytest.approx(delta ** 2 / 2, rel=1e-10)


def test_diagnostics_shrink_with_term_budget():
    target = QuarticWell()
    samples = ReferenceDensity(1).sample(5000, np.random.default_rng(25))
    reports = []
    for budget in (2, 6):
        cfg = AtmConfig(max_terms=budget, n_reference=4000, var_tol=1e-12, trace_tol=1e-12)
        tmap = atm_train_from_density(target, 1, cfg, rng=np.random.default_rng(26)).map
        reports.append(compute_diagnostics(tmap, target, samples))
    small, large = reports
    assert large.variance_diag < 0.5 * small.variance_diag
    assert large.trace_diag < 0.5 * small.trace_diag


def test_diagnostics_invariant_to_target_constant():
    tmap = TriangularMap.affine([0.2], [[1.3]])
    samples = ReferenceDensity(1).sample(500, np.random.default_rng(16))
    a = compute_diagnostics(tmap, ShiftedNormal(1, 0.5), samples)
    b = compute_diagnostics(tmap, ShiftedNormal(1, 0.5, const=-40.0), samples)
    assert a.variance_diag == pytest.approx(b.variance_diag, rel=1e-9)
    assert a.trace_diag == pytest.approx(b.trace_diag, rel=1e-12)
    assert a.variance_diag == pytest.approx(variance_diagnostic(tmap, ShiftedNormal(1, 0.5), samples=samples))
    assert a.trace_diag == pytest.approx(trace_diagnostic(tmap, ShiftedNormal(1, 0.5), samples=samples))


def test_diagnostics_need_enough_test_samples():
    with pytest.raises(ValueError):
        variance_diagnostic(TriangularMap.identity(1), ShiftedNormal(1), n_test=10)


if __name__ == "__main__":
    print("=" * 60)
    print("TESTING MAP TRAINING")
    print("=" * 60)
    raise SystemExit(pytest.main([__file__, "-v"]))
