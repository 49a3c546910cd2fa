#!/usr/bin/env python3
"""
Tests for the Metropolis-Hastings baseline and posterior comparison
"""

import numpy as np
import pytest
from scipy import stats

from app.baseline import Chain, autocorrelation, compare_posteriors, iact, mh_chain, proposal_covariance


def std_normal_logpdf(theta):
    return -0.5 * float(np.sum(np.asarray(theta) ** 2))


def ar1(phi, n, seed):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / np.sqrt(1 - phi ** 2)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + e[i]
    return x


def test_proposal_scaling():
    np.testing.assert_allclose(proposal_covariance([[1.0]]), [[5.76]])
    np.testing.assert_allclose(proposal_covariance(np.eye(2)), 2.88 * np.eye(2))


def test_chain_samples_standard_normal():
    chain = mh_chain(std_normal_logpdf, [0.0], [[1.0]], n=50000, seed=0)
    assert chain.n == 50000
    assert 0.3 < chain.acceptance_rate < 0.6
    kept = chain.burned(0.1)
    assert kept.shape == (45000, 1)
    assert kept.mean() == pytest.approx(0.0, abs=0.05)
    assert kept.var() == pytest.approx(1.0, rel=0.1)
    frame = chain.to_frame()
    assert list(frame.columns) == ["theta0", "log_posterior"]


@pytest.mark.slow
def test_chain_histogram_matches_target():
    shape = 3.0

    def gamma_logpdf(theta):
        x = theta[0]
        return (shape - 1.0) * np.log(x) - x if x > 0 else -np.inf

    chain = mh_chain(gamma_logpdf, [shape], [[shape]], n=1_000_000, seed=11)
    kept = chain.burned(0.01)[:, 0]
    edges = np.concatenate([[0.0], np.linspace(0.25, 12.0, 48), [np.inf]])
    counts, _ = np.histogram(kept, bins=edges)
    expected = np.diff(stats.gamma(shape).cdf(edges))
    assert 0.5 * np.abs(counts / kept.size - expected).sum() < 0.02


def test_chain_is_reproducible_and_respects_support():
    def half_normal(theta):
        return std_normal_logpdf(theta) if theta[0] >= 0 else -np.inf

    a = mh_chain(half_normal, [1.0], [[1.0]], n=2000, seed=3)
    b = mh_chain(half_normal, [1.0], [[1.0]], n=2000, seed=3)
    np.testing.assert_array_equal(a.states, b.states)
    assert np.all(a.states >= 0)


def test_chain_input_errors():
    with pytest.raises(ValueError):
        mh_chain(lambda th: -np.inf, [0.0], [[1.0]], n=10, seed=0)
    with pytest.raises(ValueError):
        mh_chain(std_normal_logpdf, [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], n=10, seed=0)
    with pytest.raises(ValueError):
        Chain(np.zeros((10, 1)), np.zeros(10), 0).burned(1.0)


def test_autocorrelation_starts_at_one():
    rho = autocorrelation(ar1(0.5, 20000, 1))
    assert rho[0] == pytest.approx(1.0)
    assert rho[1] == pytest.approx(0.5, abs=0.03)


def test_iact_of_independent_samples():
    assert iact(np.random.default_rng(2).standard_normal(100000)) == pytest.approx(1.0, rel=0.1)


def test_iact_of_ar1_series():
    assert iact(ar1(0.5, 200000, 4)) == pytest.approx(3.0, rel=0.1)


def test_iact_errors():
    with pytest.raises(ValueError):
        iact(np.ones(5000))
    with pytest.raises(ValueError):
        iact(np.random.default_rng(0).standard_normal(999))


def test_compare_identical_sets():
    samples = np.random.default_rng(5).standard_normal((5000, 2))
    report = compare_posteriors(samples, samples)
    assert list(report["marginal"]) == ["theta0", "theta1"]
    np.testing.assert_allclose(report["z"], 0.0)
    assert report["agree"].all()
    for column in ("tm_mean", "tm_std", "tm_p5", "mcmc_p95", "iact", "combined_se"):
        assert column in report.columns


def test_compare_disjoint_sets():
    rng = np.random.default_rng(6)
    report = compare_posteriors(rng.standard_normal(5000), 5.0 + rng.standard_normal(5000))
    assert not report["agree"].any()
    assert report["mean_diff"].iloc[0] == pytest.approx(-5.0, abs=0.1)


def test_compare_is_symmetric():
    rng = np.random.default_rng(9)
    a = rng.normal(0.0, 1.0, (3000, 2))
    b = rng.normal(0.1, 1.5, (4000, 2))
    ab, ba = compare_posteriors(a, b), compare_posteriors(b, a)
    np.testing.assert_allclose(ab["mean_diff"], -ba["mean_diff"], rtol=1e-12)
    np.testing.assert_allclose(ab["z"], ba["z"], rtol=1e-12)
    np.testing.assert_allclose(ab["combined_se"], ba["combined_se"], rtol=1e-12)


def test_agreement_frequency_for_identical_laws():
    rng = np.random.default_rng(10)
    agree = [
        bool(compare_posteriors(rng.normal(2.0, 0.5, 2000), rng.normal(2.0, 0.5, 2000))["agree"].iloc[0])
        for _ in range(100)
    ]
    assert np.mean(agree) >= 0.95


def test_compare_against_chain():
    chain = mh_chain(std_normal_logpdf, [0.0], [[1.0]], n=20000, seed=7)
    tm = np.random.default_rng(8).standard_normal((5000, 1))
    report = compare_posteriors(tm, chain)
    assert report["iact"].iloc[0] > 1.0
    assert bool(report["agree"].iloc[0])
    with pytest.raises(ValueError):
        compare_posteriors(np.zeros((10, 2)), chain)


if __name__ == "__main__":
    print("=" * 60)
    print("TESTING MCMC BASELINE")
    print("=" * 60)
    raise SystemExit(pytest.main([__file__, "-v"]))
