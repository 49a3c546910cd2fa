"""
MCMC Baseline

Random-walk Metropolis-Hastings with a fixed Gaussian proposal scaled as
(2.4^2 / d) * Sigma, integrated autocorrelation times, and moment/percentile
comparison of transport-map samples against a chain.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import pandas as pd

from app.sbi import PERCENTILES

logger = logging.getLogger(__name__)

MIN_IACT_LENGTH = 1000
IACT_WINDOW_FACTOR = 5.0
AGREEMENT_Z = 3.0


@dataclass
class Chain:
    states: np.ndarray
    log_posterior: np.ndarray
    accepted: int

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / max(self.n - 1, 1)

    def burned(self, fraction: float = 0.1) -> np.ndarray:
        if not 0 <= fraction < 1:
            raise ValueError("burn-in fraction must lie in [0, 1)")
        return self.states[int(fraction * self.n):]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.states, columns=[f"theta{i}" for i in range(self.states.shape[1])])
        frame["log_posterior"] = self.log_posterior
        return frame


def proposal_covariance(sigma, dim: Optional[int] = None) -> np.ndarray:
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    dim = dim or sigma.shape[0]
    return (2.4 ** 2 / dim) * sigma


def mh_chain(logpost: Callable[[np.ndarray], float], theta0, sigma, n: int, seed: int,
             scale_proposal: bool = True) -> Chain:
    """Metropolis chain of n states started at theta0.

    sigma is the covariance the proposal is built from; with scale_proposal
    it is multiplied by 2.4^2 / d.
    """
    theta = np.atleast_1d(np.asarray(theta0, dtype=float)).copy()
    dim = theta.size
    cov = proposal_covariance(sigma, dim) if scale_proposal else np.atleast_2d(np.asarray(sigma, dtype=float))
    if cov.shape != (dim, dim) or not np.allclose(cov, cov.T):
        raise ValueError("proposal covariance must be a symmetric d x d matrix")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise ValueError("proposal covariance must be positive definite") from e
    current = float(logpost(theta))
    if not np.isfinite(current):
        raise ValueError("log posterior is not finite at the starting point")

    rng = np.random.default_rng(seed)
    steps = rng.standard_normal((n - 1, dim)) @ chol.T
    log_u = np.log(rng.uniform(size=n - 1))
    states = np.empty((n, dim))
    values = np.empty(n)
    states[0], values[0] = theta, current
    accepted = 0
    for i in range(1, n):
        proposal = theta + steps[i - 1]
        candidate = float(logpost(proposal))
        if np.isfinite(candidate) and log_u[i - 1] < candidate - current:
            theta, current = proposal, candidate
            accepted += 1
        states[i], values[i] = theta, current
    logger.info(f"MH chain finished: {n} states, acceptance rate {accepted / max(n - 1, 1):.3f}")
    return Chain(states, values, accepted)


def autocorrelation(series: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation function via FFT."""
    x = np.asarray(series, dtype=float) - np.mean(series)
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    return acov / acov[0]


def iact(series) -> float:
    """1 + 2 sum of autocorrelations, truncated at the first window M >= 5 * tau(M)."""
    series = np.asarray(series, dtype=float).ravel()
    if series.size < MIN_IACT_LENGTH:
        raise ValueError(f"series too short for IACT: {series.size} < {MIN_IACT_LENGTH}")
    if np.ptp(series) == 0:
        raise ValueError("constant series has no autocorrelation time")
    rho = autocorrelation(series)
    taus = 2.0 * np.cumsum(rho) - 1.0
    windows = np.arange(taus.size)
    ok = windows >= IACT_WINDOW_FACTOR * taus
    m = int(np.argmax(ok)) if ok.any() else taus.size - 1
    return max(1.0, float(taus[m]))


def _summary(samples: np.ndarray) -> pd.DataFrame:
    rows = {"mean": samples.mean(axis=0), "std": samples.std(axis=0, ddof=1)}
    for p, values in zip(PERCENTILES, np.percentile(samples, PERCENTILES, axis=0)):
        rows[f"p{p}"] = values
    return pd.DataFrame(rows)


def compare_posteriors(tm_samples, chain, burn_in: float = 0.1) -> pd.DataFrame:
    """Per-marginal moments and percentiles of both sample sets.

    chain may be a Chain (burn-in is dropped and its standard error uses
    the IACT-deflated sample size) or a plain array of independent samples.
    z is the mean difference in units of the combined standard error;
    agree is z < 3.
    """
    tm = np.atleast_2d(np.asarray(tm_samples, dtype=float))
    if tm.shape[0] == 1:
        tm = tm.T
    mc = chain.burned(burn_in) if isinstance(chain, Chain) else np.atleast_2d(np.asarray(chain, dtype=float))
    if mc.shape[0] == 1:
        mc = mc.T
    if tm.shape[1] != mc.shape[1]:
        raise ValueError("sample sets have different dimensions")

    tm_stats = _summary(tm).add_prefix("tm_")
    mc_stats = _summary(mc).add_prefix("mcmc_")
    report = pd.concat([tm_stats, mc_stats], axis=1)
    report.insert(0, "marginal", [f"theta{i}" for i in range(tm.shape[1])])

    iacts = []
    for j in range(mc.shape[1]):
        if not isinstance(chain, Chain):
            iacts.append(1.0)
            continue
        try:
            iacts.append(iact(mc[:, j]))
        except ValueError as e:
            logger.warning(f"IACT unavailable for theta{j} ({e}), using 1")
            iacts.append(1.0)
    iacts = np.asarray(iacts)
    se_tm = tm.std(axis=0, ddof=1) / np.sqrt(tm.shape[0])
    se_mc = mc.std(axis=0, ddof=1) / np.sqrt(mc.shape[0] / iacts)
    combined = np.sqrt(se_tm ** 2 + se_mc ** 2)
    diff = tm.mean(axis=0) - mc.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(combined > 0, np.abs(diff) / combined, np.where(diff == 0, 0.0, np.inf))
    report["iact"] = iacts
    report["mean_diff"] = diff
    report["combined_se"] = combined
    report["z"] = z
    report["agree"] = z < AGREEMENT_Z
    return report
