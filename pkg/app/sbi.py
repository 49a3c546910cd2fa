"""
Sequential Simulation-Based Inference

Phase I builds one surrogate likelihood per assimilation step from joint
(parameter, data) samples: a triangular map is fit to the joint samples,
parameters first, and its lower (data) block gives log pi(y_t | theta).

Phase II characterizes the posteriors online without calling the model:
each new observation either adds an intermediate map to the running
composition or, when the previous diagnostics exceeded their tolerances,
replaces the composition by a direct recovery map. Long compositions are
compressed into a single map by regression.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.errors import NumericalError
from app.training import (
    AtmConfig,
    DiagnosticsReport,
    atm_train_from_density,
    atm_train_from_samples,
    atm_train_regression,
    compute_diagnostics,
)
from app.polybasis import basis_counter
from app.transport import (
    LOG_2PI,
    ComposedMap,
    GaussianDensity,
    LogDensity,
    ReferenceDensity,
    TriangularMap,
)

logger = logging.getLogger(__name__)

INTERMEDIATE = "intermediate"
RECOVERY = "recovery"
PERCENTILES = (5, 25, 50, 75, 95)


def default_surrogate_atm() -> AtmConfig:
    return AtmConfig(max_terms=12)


def default_posterior_atm() -> AtmConfig:
    return AtmConfig(max_terms=6)


def default_recovery_atm() -> AtmConfig:
    return AtmConfig(max_terms=10, max_order=7, max_total_order=7, n_reference=10000)


class AssimilationConfig(BaseModel):
    """Phase II settings."""

    model_config = ConfigDict(extra="forbid")

    var_tol: float = Field(1e-3, gt=0, description="variance diagnostic tolerance")
    trace_tol: float = Field(10 ** -2.5, gt=0, description="trace diagnostic tolerance")
    l_max: int = Field(5, ge=1, description="composition length cap")
    compression: bool = True
    recovery: bool = True
    n_test: int = Field(5000, ge=100)
    intermediate_tol_factor: float = Field(1.0, ge=1, description="tolerance multiple for intermediate maps")
    diag_subsample: Optional[int] = Field(None, ge=1, description="likelihood terms evaluated by diagnostics")
    posterior: AtmConfig = Field(default_factory=default_posterior_atm)
    recovery_atm: AtmConfig = Field(default_factory=default_recovery_atm)
    regression: AtmConfig = Field(default_factory=default_posterior_atm)
    seed: int = Field(0, ge=0)


# ----------------------------------------------------------------------
# Phase I
# ----------------------------------------------------------------------

@dataclass
class JointSampleSet:
    """Row-aligned parameter and data samples of one step."""

    theta: np.ndarray
    y: np.ndarray
    t: int
    skipped: int = 0
    seed: Optional[int] = None
    model_id: str = ""

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim == 1:
            self.theta = self.theta[:, None]
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.theta.shape[0] != self.y.shape[0]:
            raise ValueError("theta and y blocks must have the same number of rows")
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.y))):
            raise ValueError("joint samples must be finite")

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def n_theta(self) -> int:
        return self.theta.shape[1]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]

    @property
    def joint(self) -> np.ndarray:
        return np.hstack([self.theta, self.y])


@dataclass(eq=False)
class SurrogateLikelihood:
    """log pi(y_t | theta) from the data block of a joint pullback map."""

    map: TriangularMap
    n_theta: int
    t: int
    trace: Optional[pd.DataFrame] = field(default=None, repr=False)

    def __post_init__(self):
        if not 1 <= self.n_theta < self.map.dim:
            raise ValueError("the joint map needs at least one parameter and one data variable")

    @property
    def n_y(self) -> int:
        return self.map.dim - self.n_theta

    @property
    def y_components(self):
        return self.map.components[self.n_theta:]

    def _joint(self, theta, y) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if theta.shape[1] != self.n_theta or y.shape[1] != self.n_y:
            raise ValueError(f"expected {self.n_theta} parameters and {self.n_y} data values")
        n = max(theta.shape[0], y.shape[0])
        return np.hstack([np.broadcast_to(theta, (n, self.n_theta)), np.broadcast_to(y, (n, self.n_y))])

    def loglik(self, theta, y) -> np.ndarray:
        U = self.map.standardize(self._joint(theta, y))
        total = -np.sum(np.log(self.map.scale[self.n_theta:]))
        for comp in self.y_components:
            value, dk = comp.evaluate(U[:, :comp.k])
            total = total - 0.5 * value ** 2 - 0.5 * LOG_2PI + np.log(dk)
        return total

    def loglik_and_grad(self, theta, y) -> Tuple[np.ndarray, np.ndarray]:
        """Log-likelihood and its gradient in theta.

        d/dtheta sum_j [ -S_j^2/2 + log d_j S_j ], with S_j the data-block
        components evaluated at standardized inputs.
        """
        U = self.map.standardize(self._joint(theta, y))
        total = -np.sum(np.log(self.map.scale[self.n_theta:]))
        grad = np.zeros((U.shape[0], self.n_theta))
        for comp in self.y_components:
            X = U[:, :comp.k]
            value, dk = comp.evaluate(X)
            total = total - 0.5 * value ** 2 - 0.5 * LOG_2PI + np.log(dk)
            dS = comp.grad_input(X)[:, :self.n_theta]
            dlog = comp.grad_log_dk(X)[:, :self.n_theta]
            grad += -value[:, None] * dS + dlog
        return total, grad / self.map.scale[:self.n_theta]

    def grad_loglik(self, theta, y) -> np.ndarray:
        return self.loglik_and_grad(theta, y)[1]

    def sample_y(self, theta, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw y ~ pi(y | theta) by inverting the data block on reference draws."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        U = np.empty((n, self.map.dim))
        U[:, :self.n_theta] = (np.broadcast_to(theta, (n, self.n_theta)) - self.map.shift[:self.n_theta]) \
            / self.map.scale[:self.n_theta]
        Z = rng.standard_normal((n, self.n_y))
        for j, comp in enumerate(self.y_components):
            k = comp.k
            U[:, k - 1] = comp.invert(U[:, :k - 1], Z[:, j])
        return self.map.shift[self.n_theta:] + self.map.scale[self.n_theta:] * U[:, self.n_theta:]

    def to_dict(self) -> dict:
        return {"t": self.t, "n_theta": self.n_theta, "map": self.map.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "SurrogateLikelihood":
        return cls(TriangularMap.from_dict(data["map"]), int(data["n_theta"]), int(data["t"]))


def build_surrogate(joint: JointSampleSet, cfg: Optional[AtmConfig] = None) -> SurrogateLikelihood:
    """Train the data block of a joint map on (theta, y_t) samples.

    Only the data components are adapted: with a product reference the
    objective splits per component, so the parameter block has no influence
    on the conditional and is left as the identity.
    """
    cfg = cfg or default_surrogate_atm()
    if joint.n < 1000:
        logger.warning(f"Step {joint.t}: only {joint.n} joint samples, surrogate accuracy will be poor")
    d = joint.n_theta + joint.n_y
    result = atm_train_from_samples(joint.joint, cfg, components=range(joint.n_theta + 1, d + 1))
    logger.info(f"Step {joint.t}: surrogate trained with {result.map.n_terms} terms")
    return SurrogateLikelihood(result.map, joint.n_theta, joint.t, trace=result.trace)


def loglik(sur: SurrogateLikelihood, theta, y) -> float:
    return float(sur.loglik(theta, y)[0])


def grad_loglik(sur: SurrogateLikelihood, theta, y) -> np.ndarray:
    return sur.grad_loglik(theta, y)[0]


# ----------------------------------------------------------------------
# Phase II densities
# ----------------------------------------------------------------------

class PosteriorDensity:
    """Unnormalized running posterior: prior times the registered likelihoods.

    With subsample=k only k randomly chosen likelihood terms are evaluated
    and their sum is rescaled by t/k; the subset is fixed at construction.
    """

    def __init__(self, prior: LogDensity, surrogates: Sequence[SurrogateLikelihood],
                 observations: Sequence[np.ndarray], subsample: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        if len(surrogates) != len(observations):
            raise ValueError("one observation per surrogate is required")
        self.prior = prior
        self.dim = prior.dim
        terms = list(zip(surrogates, observations))
        self.weight = 1.0
        if subsample is not None and subsample < len(terms):
            rng = rng if rng is not None else np.random.default_rng()
            chosen = np.sort(rng.choice(len(terms), size=subsample, replace=False))
            self.weight = len(terms) / subsample
            terms = [terms[i] for i in chosen]
        self.terms = terms

    def log_density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        total = sum((sur.loglik(X, y) for sur, y in self.terms), np.zeros(X.shape[0]))
        return self.prior.log_density(X) + self.weight * total

    def grad_log_density(self, X: np.ndarray) -> np.ndarray:
        return self.log_density_and_grad(X)[1]

    def log_density_and_grad(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(X)
        value = np.zeros(X.shape[0])
        grad = np.zeros_like(X)
        for sur, y in self.terms:
            v, g = sur.loglik_and_grad(X, y)
            value += v
            grad += g
        return (self.prior.log_density(X) + self.weight * value,
                self.prior.grad_log_density(X) + self.weight * grad)


class IntermediateDensity:
    """log pi(y_t | M(x)) + log reference(x), in reference coordinates of M."""

    def __init__(self, surrogate: SurrogateLikelihood, y: np.ndarray, composition: ComposedMap):
        self.surrogate = surrogate
        self.y = np.atleast_1d(np.asarray(y, dtype=float))
        self.composition = composition
        self.dim = composition.dim
        self.reference = ReferenceDensity(self.dim)

    def log_density(self, X: np.ndarray) -> np.ndarray:
        theta = self.composition.transport(X)
        return self.surrogate.loglik(theta, self.y) + self.reference.log_density(X)

    def grad_log_density(self, X: np.ndarray) -> np.ndarray:
        return self.log_density_and_grad(X)[1]

    def log_density_and_grad(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(X)
        theta, inputs = self.composition.forward(X)
        value, g = self.surrogate.loglik_and_grad(theta, self.y)
        return (value + self.reference.log_density(X),
                self.composition.vjp_from_inputs(inputs, g) + self.reference.grad_log_density(X))


# ----------------------------------------------------------------------
# Phase II state
# ----------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    branch: str
    compressed: bool
    compression_failed: bool
    composition_length: int
    n_terms: int
    order: int
    variance_diag: float
    trace_diag: float
    diagnostics_flagged: bool
    step_cost: int
    diagnostics_cost: int
    percentiles: Dict[str, List[float]]
    mean: List[float]

    def within(self, var_tol: float, trace_tol: float) -> bool:
        return (not self.diagnostics_flagged
                and self.variance_diag < var_tol and self.trace_diag < trace_tol)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def tidy_rows(self) -> List[dict]:
        """(step, quantity, value) rows for external plotting."""
        rows = [
            {"step": self.step, "quantity": name, "value": float(getattr(self, name))}
            for name in ("composition_length", "n_terms", "order", "variance_diag", "trace_diag",
                         "step_cost", "diagnostics_cost")
        ]
        rows.append({"step": self.step, "quantity": "recovery", "value": float(self.branch == RECOVERY)})
        rows.append({"step": self.step, "quantity": "compressed", "value": float(self.compressed)})
        for i, m in enumerate(self.mean):
            rows.append({"step": self.step, "quantity": f"theta{i}_mean", "value": m})
        for key, values in self.percentiles.items():
            for i, v in enumerate(values):
                rows.append({"step": self.step, "quantity": f"theta{i}_{key}", "value": v})
        return rows


@dataclass
class AssimilationState:
    composition: ComposedMap
    prior: GaussianDensity
    registry: Mapping[int, SurrogateLikelihood]
    config: AssimilationConfig = field(default_factory=AssimilationConfig)
    t: int = 0
    observations: Dict[int, np.ndarray] = field(default_factory=dict)
    history: List[StepRecord] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.prior.dim

    @property
    def last_diagnostics(self) -> Optional[StepRecord]:
        return self.history[-1] if self.history else None


def initial_state(prior: GaussianDensity, registry: Mapping[int, SurrogateLikelihood],
                  config: Optional[AssimilationConfig] = None) -> AssimilationState:
    """State at t=0; the composition holds the affine map pushing the reference to the prior."""
    config = config or AssimilationConfig()
    family = config.posterior.family()
    prior_map = TriangularMap.affine(prior.mean, prior.chol, family, config.posterior.quad_order)
    return AssimilationState(ComposedMap((prior_map,)), prior, dict(registry), config)


def _step_rng(config: AssimilationConfig, t: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, t, purpose]))


def _running_posterior(state: AssimilationState, t: int, observations: Mapping[int, np.ndarray],
                       subsample: Optional[int] = None, rng=None) -> PosteriorDensity:
    steps = range(1, t + 1)
    return PosteriorDensity(state.prior, [state.registry[s] for s in steps],
                            [observations[s] for s in steps], subsample, rng)


def _moment_map(composition: ComposedMap, n: int, rng: np.random.Generator, cfg: AtmConfig) -> Optional[TriangularMap]:
    """Affine map matching the mean and covariance of the composition's samples."""
    samples = composition.transport(ReferenceDensity(composition.dim).sample(n, rng))
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None
    return TriangularMap.affine(samples.mean(axis=0), chol, cfg.family(), cfg.quad_order)


def compress_composition(composition: ComposedMap, cfg: AtmConfig,
                         rng: np.random.Generator) -> Tuple[ComposedMap, bool]:
    """Regress one map on (x, M(x)) pairs, x ~ reference.

    Returns the original composition and False when the held-out residual
    stays above the regression threshold.
    """
    X = ReferenceDensity(composition.dim).sample(cfg.n_reference, rng)
    Z = composition.transport(X)
    result = atm_train_regression(X, Z, cfg)
    if not result.converged:
        logger.warning(f"Compression residual above {cfg.regression_tol:g}, keeping composition of length {len(composition)}")
        return composition, False
    return ComposedMap((result.map,)), True


def compress(state: AssimilationState) -> AssimilationState:
    if len(state.composition) <= state.config.l_max:
        raise ValueError("composition is not longer than l_max")
    composition, ok = compress_composition(state.composition, state.config.regression,
                                           _step_rng(state.config, state.t, 2))
    return replace(state, composition=composition)


def _with_tolerances(cfg: AtmConfig, var_tol: float, trace_tol: float) -> AtmConfig:
    return cfg.model_copy(update={"var_tol": var_tol, "trace_tol": trace_tol})


def _recovery_map(state: AssimilationState, t: int, observations: Mapping[int, np.ndarray],
                  rng: np.random.Generator, X_test: np.ndarray) -> TriangularMap:
    """Direct map to the running posterior; both diagnostics on X_test must pass."""
    target = _running_posterior(state, t, observations)
    cfg = _with_tolerances(state.config.recovery_atm, state.config.var_tol, state.config.trace_tol)
    initial = _moment_map(state.composition, cfg.n_reference, rng, cfg)
    result = atm_train_from_density(target, state.dim, cfg, initial=initial, rng=rng,
                                    require_both=True, test_samples=X_test)
    if not result.converged:
        logger.warning(f"Step {t}: recovery map did not reach the tolerances, raise recovery_atm.max_terms")
    return result.map


def recover(state: AssimilationState) -> AssimilationState:
    """Replace the composition by a direct map to the posterior of steps 1..t."""
    X_test = ReferenceDensity(state.dim).sample(state.config.n_test, _step_rng(state.config, state.t, 3))
    tmap = _recovery_map(state, state.t, state.observations, _step_rng(state.config, state.t, 1), X_test)
    return replace(state, composition=ComposedMap((tmap,)))


def _summaries(samples: np.ndarray) -> Tuple[Dict[str, List[float]], List[float]]:
    pct = np.percentile(samples, PERCENTILES, axis=0)
    percentiles = {f"p{p}": pct[i].tolist() for i, p in enumerate(PERCENTILES)}
    return percentiles, samples.mean(axis=0).tolist()


def assimilate_step(state: AssimilationState, y_t) -> AssimilationState:
    """Assimilate the next observation and return the new state.

    The input state is never modified, so a failed step leaves it intact.
    """
    cfg = state.config
    t = state.t + 1
    if t not in state.registry:
        raise ValueError(f"missing surrogate for step {t}")
    y_t = np.atleast_1d(np.asarray(y_t, dtype=float))
    observations = {**state.observations, t: y_t}
    start = basis_counter.count

    X_test = ReferenceDensity(state.dim).sample(cfg.n_test, _step_rng(cfg, t, 3))
    last = state.last_diagnostics
    if t == 1 or not cfg.recovery or (last is not None and last.within(cfg.var_tol, cfg.trace_tol)):
        target = IntermediateDensity(state.registry[t], y_t, state.composition)
        factor = cfg.intermediate_tol_factor
        posterior_cfg = _with_tolerances(cfg.posterior, factor * cfg.var_tol, factor * cfg.trace_tol)
        result = atm_train_from_density(target, state.dim, posterior_cfg, rng=_step_rng(cfg, t, 0))
        composition = state.composition.then(result.map)
        branch = INTERMEDIATE
    else:
        composition = ComposedMap((_recovery_map(state, t, observations, _step_rng(cfg, t, 1), X_test),))
        branch = RECOVERY

    compressed = compression_failed = False
    if cfg.compression and len(composition) > cfg.l_max:
        composition, compressed = compress_composition(composition, cfg.regression, _step_rng(cfg, t, 2))
        compression_failed = not compressed
    step_cost = basis_counter.count - start

    new_state = replace(state, composition=composition, t=t, observations=observations,
                        history=list(state.history))
    posterior = _running_posterior(new_state, t, observations, cfg.diag_subsample, _step_rng(cfg, t, 4))
    start = basis_counter.count
    try:
        diagnostics = compute_diagnostics(composition, posterior, X_test)
        flagged = False
    except NumericalError as e:
        logger.warning(f"Step {t}: diagnostics failed: {e}")
        diagnostics = DiagnosticsReport(np.nan, np.nan, cfg.n_test)
        flagged = True
    diagnostics_cost = basis_counter.count - start

    percentiles, mean = _summaries(composition.transport(X_test))
    record = StepRecord(
        step=t, branch=branch, compressed=compressed, compression_failed=compression_failed,
        composition_length=len(composition), n_terms=composition.n_terms, order=composition.order,
        variance_diag=diagnostics.variance_diag, trace_diag=diagnostics.trace_diag,
        diagnostics_flagged=flagged, step_cost=step_cost, diagnostics_cost=diagnostics_cost,
        percentiles=percentiles, mean=mean,
    )
    new_state.history.append(record)
    logger.info(f"Step {t}: {branch}{' + compression' if compressed else ''}, length {len(composition)}, "
                f"var {diagnostics.variance_diag:.3g}, trace {diagnostics.trace_diag:.3g}, cost {step_cost}")
    return new_state


def run_assimilation(state: AssimilationState, observations: Sequence) -> AssimilationState:
    for y_t in observations:
        state = assimilate_step(state, y_t)
    return state


def sample_posterior(state: AssimilationState, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    return state.composition.transport(ReferenceDensity(state.dim).sample(n, rng))


@dataclass
class MapProposal:
    """Phase I proposal that pushes reference samples through a stored posterior map."""

    composition: ComposedMap

    @property
    def dim(self) -> int:
        return self.composition.dim

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.composition.transport(ReferenceDensity(self.dim).sample(n, rng))


def history_frame(state: AssimilationState) -> pd.DataFrame:
    """Assimilation log, one row per step."""
    rows = []
    for rec in state.history:
        row = {k: v for k, v in rec.to_dict().items() if k not in ("percentiles", "mean")}
        for i, m in enumerate(rec.mean):
            row[f"theta{i}_mean"] = m
            for key, values in rec.percentiles.items():
                row[f"theta{i}_{key}"] = values[i]
        rows.append(row)
    return pd.DataFrame(rows)


def tidy_frame(state: AssimilationState) -> pd.DataFrame:
    return pd.DataFrame([row for rec in state.history for row in rec.tidy_rows()],
                        columns=["step", "quantity", "value"])
