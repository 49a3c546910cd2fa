"""
Map Training

Variational objectives for triangular maps, a BFGS driver, the adaptive
transport map (ATM) enrichment loop for the three objective kinds, and the
variance/trace diagnostics used to monitor map accuracy.

Objective kinds:
    from_samples  - KL fit of a pullback map to samples, one independent
                    problem per component
    regression    - least squares fit of each component to target values
    from_density  - KL fit of a pushforward map to an unnormalized density
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import optimize

from app.errors import DegenerateSamplesError, NumericalError
from app.indexset import MultiIndex
from app.polybasis import BasisFamily, basis_counter
from app.transport import (
    LOG_2PI,
    PULLBACK,
    PUSHFORWARD,
    ComposedMap,
    LogDensity,
    MapComponent,
    ReferenceDensity,
    TriangularMap,
)

logger = logging.getLogger(__name__)

FROM_SAMPLES = "from_samples"
FROM_DENSITY = "from_density"
REGRESSION = "regression"
OBJECTIVE_KINDS = (FROM_SAMPLES, FROM_DENSITY, REGRESSION)

MIN_SAMPLES = 10

TRACE_COLUMNS = [
    "iteration", "component", "selected_index", "n_terms", "train_objective",
    "validation_objective", "variance_diag", "trace_diag", "basis_evals",
]


class AtmConfig(BaseModel):
    """Settings of one ATM training run."""

    model_config = ConfigDict(extra="forbid")

    max_terms: int = Field(12, ge=2, description="term cap per component")
    max_order: int = Field(5, ge=1, description="cap on any single variable's degree")
    max_total_order: int = Field(5, ge=1)
    quad_order: int = Field(32, ge=1)
    tail_bound: float = Field(3.0, gt=0)
    max_iter: int = Field(500, ge=1)
    gtol: float = Field(1e-6, gt=0)
    validation_fraction: float = Field(0.2, gt=0, lt=1)
    patience: int = Field(2, ge=1)
    min_improvement: float = Field(1e-4, gt=0)
    regression_tol: float = Field(1e-6, gt=0)
    var_tol: float = Field(1e-3, gt=0)
    trace_tol: float = Field(10 ** -2.5, gt=0)
    n_reference: int = Field(5000, ge=MIN_SAMPLES)
    n_test: int = Field(5000, ge=100)
    workers: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)

    def family(self) -> BasisFamily:
        return BasisFamily(max_order=self.max_order, tail_bound=self.tail_bound)


# ----------------------------------------------------------------------
# Objectives
# ----------------------------------------------------------------------

def _first_bad(values: np.ndarray) -> Optional[int]:
    bad = np.flatnonzero(~np.isfinite(values))
    return int(bad[0]) if bad.size else None


def _check_samples(X: np.ndarray, what: str = "samples") -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < MIN_SAMPLES:
        raise ValueError(f"at least {MIN_SAMPLES} {what} are needed, got {X.shape[0]}")
    bad = _first_bad(X.sum(axis=1))
    if bad is not None:
        raise NumericalError(f"non-finite {what}", sample_index=bad)
    return X


class ComponentObjective:
    """from_samples or regression objective of a single component.

    from_samples: J = 1/n sum[ S^2/2 + log(2 pi)/2 - log d_k S ]
    regression:   J = 1/2 sum (S - z)^2
    """

    def __init__(self, kind: str, component: MapComponent, X: np.ndarray,
                 targets: Optional[np.ndarray] = None, extra: Sequence[MultiIndex] = ()):
        if kind not in (FROM_SAMPLES, REGRESSION):
            raise ValueError(f"component objective cannot be {kind!r}")
        if kind == REGRESSION and targets is None:
            raise ValueError("regression needs target values")
        self.kind = kind
        self.component = component
        self.X = X[:, :component.k]
        self.targets = None if targets is None else np.asarray(targets, dtype=float)
        self.features = component.features(self.X, extra)
        self.basis_evals = 0

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def terms(self, coeffs: np.ndarray, gradient: bool = True):
        self.basis_evals += self.features.n_evals
        return self.features.evaluate(coeffs, gradient)

    def value(self, coeffs: np.ndarray) -> float:
        return self.value_grad(coeffs, gradient=False)[0]

    def value_grad(self, coeffs: np.ndarray, gradient: bool = True) -> Tuple[float, Optional[np.ndarray]]:
        ev = self.terms(coeffs, gradient)
        if self.kind == FROM_SAMPLES:
            per_sample = 0.5 * ev.value ** 2 + 0.5 * LOG_2PI - ev.log_dk
            bad = _first_bad(per_sample)
            if bad is not None:
                raise NumericalError("non-finite from_samples objective", sample_index=bad)
            value = float(np.mean(per_sample))
            if not gradient:
                return value, None
            grad = np.mean(ev.value[:, None] * ev.dvalue_dw - ev.dlogdk_dw, axis=0)
            return value, grad
        residual = ev.value - self.targets
        bad = _first_bad(residual)
        if bad is not None:
            raise NumericalError("non-finite regression residual", sample_index=bad)
        value = 0.5 * float(residual @ residual)
        if not gradient:
            return value, None
        return value, residual @ ev.dvalue_dw

    def mean_squared_residual(self, coeffs: np.ndarray) -> float:
        return 2.0 * self.value(coeffs) / self.n_samples


class DensityObjective:
    """from_density objective of a whole pushforward map.

    J = -1/n sum[ log target(T(x)) + sum_k log d_k T_k(x) ],  x ~ reference.
    Coefficients of all components are concatenated in component order.
    """

    kind = FROM_DENSITY

    def __init__(self, tmap: TriangularMap, target: LogDensity, X: np.ndarray,
                 extra: Optional[Dict[int, Sequence[MultiIndex]]] = None):
        if tmap.direction != PUSHFORWARD:
            raise ValueError("from_density training needs a pushforward map")
        self.map = tmap
        self.target = target
        self.X = tmap.standardize(X)
        extra = extra or {}
        self.features = [comp.features(self.X[:, :comp.k], extra.get(comp.k, ())) for comp in tmap.components]
        self.sizes = [f.n_terms for f in self.features]
        self.basis_evals = 0

    def split(self, coeffs: np.ndarray) -> List[np.ndarray]:
        return np.split(np.asarray(coeffs, dtype=float), np.cumsum(self.sizes)[:-1])

    def pack(self, tmap: TriangularMap) -> np.ndarray:
        return np.concatenate([comp.coeffs for comp in tmap.components])

    def unpack(self, coeffs: np.ndarray) -> TriangularMap:
        return self.map.with_components(
            comp.with_coeffs(w) for comp, w in zip(self.map.components, self.split(coeffs))
        )

    def value(self, coeffs: np.ndarray) -> float:
        return self.value_grad(coeffs, gradient=False)[0]

    def value_grad(self, coeffs: np.ndarray, gradient: bool = True) -> Tuple[float, Optional[np.ndarray]]:
        evals = []
        for feats, w in zip(self.features, self.split(coeffs)):
            self.basis_evals += feats.n_evals
            evals.append(feats.evaluate(w, gradient))
        Y = np.column_stack([ev.value for ev in evals])
        log_det = sum(ev.log_dk for ev in evals) - np.sum(np.log(self.map.scale))
        log_target, grad_target = log_density_and_grad(self.target, Y, gradient)
        per_sample = log_target + log_det
        bad = _first_bad(per_sample)
        if bad is not None:
            raise NumericalError("non-finite from_density objective", sample_index=bad)
        value = -float(np.mean(per_sample))
        if not gradient:
            return value, None
        grads = [
            -np.mean(grad_target[:, k, None] * ev.dvalue_dw + ev.dlogdk_dw, axis=0)
            for k, ev in enumerate(evals)
        ]
        return value, np.concatenate(grads)


Objective = Union[ComponentObjective, DensityObjective]


def log_density_and_grad(target: LogDensity, Y: np.ndarray, gradient: bool = True):
    if hasattr(target, "log_density_and_grad"):
        if gradient:
            return target.log_density_and_grad(Y)
        return target.log_density(Y), None
    return target.log_density(Y), (target.grad_log_density(Y) if gradient else None)


def objective_value_grad(objective: Objective, coeffs: np.ndarray) -> Tuple[float, np.ndarray]:
    return objective.value_grad(np.asarray(coeffs, dtype=float))


# ----------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------

@dataclass
class MinimizeReport:
    value: float
    iterations: int
    n_calls: int
    basis_evals: int
    success: bool
    warning: bool = False
    message: str = ""


def minimize(objective, w0: np.ndarray, cfg: Optional[AtmConfig] = None) -> Tuple[np.ndarray, MinimizeReport]:
    """BFGS with Wolfe line search on objective.value_grad.

    Stops at gradient inf-norm below cfg.gtol or cfg.max_iter iterations.
    The best iterate seen is returned even when the line search gives up.
    """
    cfg = cfg or AtmConfig()
    w0 = np.asarray(w0, dtype=float)
    start_evals = getattr(objective, "basis_evals", 0)
    best = {"value": np.inf, "w": w0.copy()}
    calls = 0

    def fun(w):
        nonlocal calls
        calls += 1
        value, grad = objective.value_grad(w)
        if value < best["value"]:
            best["value"], best["w"] = value, np.array(w, copy=True)
        return value, grad

    result = optimize.minimize(
        fun, w0, jac=True, method="BFGS",
        options={"gtol": cfg.gtol, "maxiter": cfg.max_iter, "norm": np.inf},
    )
    warning = not result.success
    if warning:
        logger.warning(f"Optimizer stopped without convergence after {result.nit} iterations: {result.message}")
    report = MinimizeReport(
        value=float(best["value"]),
        iterations=int(result.nit),
        n_calls=calls,
        basis_evals=getattr(objective, "basis_evals", 0) - start_evals,
        success=bool(result.success),
        warning=warning,
        message=str(result.message),
    )
    return best["w"], report


# ----------------------------------------------------------------------
# Diagnostics
# ----------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    variance_diag: float
    trace_diag: float
    n_test: int
    basis_evals: int = 0

    def within(self, var_tol: float, trace_tol: float) -> bool:
        return self.variance_diag < var_tol and self.trace_diag < trace_tol

    def to_dict(self) -> dict:
        return {"variance_diag": self.variance_diag, "trace_diag": self.trace_diag, "n_test": self.n_test}


def _as_composed(S: Union[TriangularMap, ComposedMap]) -> ComposedMap:
    return S if isinstance(S, ComposedMap) else ComposedMap((S,))


def _test_samples(dim: int, reference: Optional[LogDensity], n_test: int,
                  rng: Optional[np.random.Generator], samples: Optional[np.ndarray]):
    reference = reference or ReferenceDensity(dim)
    if samples is None:
        if n_test < 100:
            raise ValueError("diagnostics need at least 100 test samples")
        rng = rng if rng is not None else np.random.default_rng()
        samples = reference.sample(n_test, rng)
    return reference, np.atleast_2d(samples)


def variance_diagnostic(S, target: LogDensity, reference: Optional[LogDensity] = None, n_test: int = 5000,
                        rng: Optional[np.random.Generator] = None, samples: Optional[np.ndarray] = None) -> float:
    """Half the variance of log(S^# target / reference) over reference samples."""
    M = _as_composed(S)
    reference, X = _test_samples(M.dim, reference, n_test, rng, samples)
    log_ratio = M.log_pullback(target, X) - reference.log_density(X)
    bad = _first_bad(log_ratio)
    if bad is not None:
        raise NumericalError("non-finite log ratio in variance diagnostic", sample_index=bad)
    return 0.5 * float(np.var(log_ratio))


def trace_diagnostic(S, target: LogDensity, reference: Optional[LogDensity] = None, n_test: int = 5000,
                     rng: Optional[np.random.Generator] = None, samples: Optional[np.ndarray] = None) -> float:
    """Half the mean squared norm of grad log(S^# target / reference)."""
    M = _as_composed(S)
    reference, X = _test_samples(M.dim, reference, n_test, rng, samples)
    _, grad = M.log_pullback_and_grad(target, X)
    grad = grad - reference.grad_log_density(X)
    norms = np.sum(grad ** 2, axis=1)
    bad = _first_bad(norms)
    if bad is not None:
        raise NumericalError("non-finite gradient in trace diagnostic", sample_index=bad)
    return 0.5 * float(np.mean(norms))


def compute_diagnostics(S, target: LogDensity, samples: np.ndarray,
                        reference: Optional[LogDensity] = None) -> DiagnosticsReport:
    """Both diagnostics from one forward/reverse sweep over the test samples."""
    M = _as_composed(S)
    reference = reference or ReferenceDensity(M.dim)
    X = np.atleast_2d(samples)
    start = basis_counter.count
    log_pull, grad = M.log_pullback_and_grad(target, X)
    log_ratio = log_pull - reference.log_density(X)
    norms = np.sum((grad - reference.grad_log_density(X)) ** 2, axis=1)
    bad = _first_bad(log_ratio + norms)
    if bad is not None:
        raise NumericalError("non-finite diagnostics", sample_index=bad)
    return DiagnosticsReport(
        variance_diag=0.5 * float(np.var(log_ratio)),
        trace_diag=0.5 * float(np.mean(norms)),
        n_test=X.shape[0],
        basis_evals=basis_counter.count - start,
    )


# ----------------------------------------------------------------------
# ATM
# ----------------------------------------------------------------------

@dataclass
class TrainResult:
    map: TriangularMap
    trace: pd.DataFrame
    basis_evals: int
    converged: bool = True
    diagnostics: Optional[DiagnosticsReport] = None
    warnings: List[str] = field(default_factory=list)


def _trace_row(iteration, component, selected, n_terms, train, valid=np.nan,
               var=np.nan, trace=np.nan, evals=0) -> dict:
    return {
        "iteration": iteration,
        "component": component,
        "selected_index": "" if selected is None else str(tuple(selected)),
        "n_terms": n_terms,
        "train_objective": train,
        "validation_objective": valid,
        "variance_diag": var,
        "trace_diag": trace,
        "basis_evals": evals,
    }


def _best_candidate(margin: Sequence[MultiIndex], grads: np.ndarray) -> MultiIndex:
    # margin is sorted, argmax returns the first maximum
    return margin[int(np.argmax(np.abs(grads)))]


def _split(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_valid = max(1, int(round(fraction * n)))
    return order[n_valid:], order[:n_valid]


def _component_task(task: dict) -> Tuple[MapComponent, List[dict], int, List[str]]:
    """Adapt one component (from_samples or regression); runs in worker processes."""
    kind = task["kind"]
    cfg: AtmConfig = task["cfg"]
    comp: MapComponent = task["initial"]
    k = comp.k
    X_train, X_valid = task["X_train"], task["X_valid"]
    z_train, z_valid = task.get("z_train"), task.get("z_valid")
    rows, warnings = [], []
    evals = 0
    best_valid, best_comp = np.inf, comp
    stall_ref, stall = np.inf, 0
    selected = None

    for iteration in range(cfg.max_terms):
        objective = ComponentObjective(kind, comp, X_train, z_train)
        w, report = minimize(objective, comp.coeffs, cfg)
        if report.warning:
            warnings.append(f"component {k}: {report.message}")
        comp = comp.with_coeffs(w)
        valid_obj = ComponentObjective(kind, comp, X_valid, z_valid)
        if kind == REGRESSION:
            valid = valid_obj.mean_squared_residual(comp.coeffs)
        else:
            valid = valid_obj.value(comp.coeffs)
        evals += objective.basis_evals + valid_obj.basis_evals
        rows.append(_trace_row(iteration, k, selected, len(comp.index_set), report.value, valid, evals=evals))
        logger.debug(f"{kind} component {k} iteration {iteration}: {len(comp.index_set)} terms, "
                     f"train {report.value:.6g}, validation {valid:.6g}")

        if kind == FROM_SAMPLES:
            if valid < best_valid:
                best_valid, best_comp = valid, comp
            if valid < stall_ref - cfg.min_improvement:
                stall_ref, stall = valid, 0
            else:
                stall += 1
                if stall >= cfg.patience:
                    break
        else:
            best_comp = comp
            if valid < cfg.regression_tol:
                break

        if len(comp.index_set) >= cfg.max_terms:
            break
        margin = comp.index_set.reduced_margin(cfg.max_order, cfg.max_total_order)
        if not margin:
            break
        candidates = ComponentObjective(kind, comp, X_train, z_train, extra=margin)
        _, grad = candidates.value_grad(np.concatenate([comp.coeffs, np.zeros(len(margin))]))
        evals += candidates.basis_evals
        selected = _best_candidate(margin, grad[len(comp.index_set):])
        comp = comp.with_index(selected)

    return best_comp, rows, evals, warnings


def _run_component_tasks(tasks: List[dict], workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [_component_task(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        results = list(pool.map(_component_task, tasks))
    # child processes count into their own copy of the counter
    basis_counter.add(sum(r[2] for r in results))
    return results


def standardization(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(X)
    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    degenerate = np.flatnonzero(~(scale > 1e-12 * (1.0 + np.abs(shift))))
    if degenerate.size:
        raise DegenerateSamplesError(f"column {int(degenerate[0])} has zero variance")
    return shift, scale


def atm_train_from_samples(X: np.ndarray, cfg: Optional[AtmConfig] = None,
                           components: Optional[Sequence[int]] = None) -> TrainResult:
    """Pullback map S with S^# reference ~ empirical law of X.

    components (1-based) restricts training to a subset; the others stay the
    identity. Components are independent problems and run in parallel when
    cfg.workers > 1.
    """
    cfg = cfg or AtmConfig()
    X = _check_samples(X)
    n, dim = X.shape
    shift, scale = standardization(X)
    U = (X - shift) / scale
    train, valid = _split(n, cfg.validation_fraction, cfg.seed)
    family = cfg.family()
    chosen = list(range(1, dim + 1)) if components is None else sorted(set(components))
    if any(not 1 <= k <= dim for k in chosen):
        raise ValueError(f"components must lie in 1..{dim}")

    tasks = [
        {
            "kind": FROM_SAMPLES, "cfg": cfg,
            "initial": MapComponent.identity(k, family, cfg.quad_order),
            "X_train": U[train, :k], "X_valid": U[valid, :k],
        }
        for k in chosen
    ]
    results = dict(zip(chosen, _run_component_tasks(tasks, cfg.workers)))
    comps = [
        results[k][0] if k in results else MapComponent.identity(k, family, cfg.quad_order)
        for k in range(1, dim + 1)
    ]
    tmap = TriangularMap(tuple(comps), shift, scale, PULLBACK)
    trace = pd.DataFrame([row for k in chosen for row in results[k][1]], columns=TRACE_COLUMNS)
    evals = sum(results[k][2] for k in chosen)
    warnings = [w for k in chosen for w in results[k][3]]
    logger.info(f"from_samples map trained: dim {dim}, {tmap.n_terms} terms, {evals} basis evaluations")
    return TrainResult(tmap, trace, evals, warnings=warnings)


def affine_warm_start(X: np.ndarray, Z: np.ndarray, family: BasisFamily, quad_order: int) -> TriangularMap:
    """Least-squares affine pushforward map x -> z, used as a regression start."""
    n, dim = X.shape
    comps = []
    for k in range(1, dim + 1):
        design = np.column_stack([np.ones(n), X[:, :k]])
        coef, *_ = np.linalg.lstsq(design, Z[:, k - 1], rcond=None)
        slopes = coef[1:].copy()
        if not slopes[-1] > 1e-8:
            slopes[-1] = 1.0
        comps.append(MapComponent.affine(coef[0], slopes, family, quad_order))
    return TriangularMap(tuple(comps), direction=PUSHFORWARD)


def atm_train_regression(X: np.ndarray, Z: np.ndarray, cfg: Optional[AtmConfig] = None,
                         initial: Optional[TriangularMap] = None) -> TrainResult:
    """Pushforward map T with T(x_i) ~ z_i, one least-squares problem per component."""
    cfg = cfg or AtmConfig()
    X = _check_samples(X)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape != X.shape:
        raise ValueError("regression inputs and targets must have the same shape")
    n, dim = X.shape
    family = cfg.family()
    start = initial or affine_warm_start(X, Z, family, cfg.quad_order)
    train, valid = _split(n, cfg.validation_fraction, cfg.seed)
    tasks = [
        {
            "kind": REGRESSION, "cfg": cfg, "initial": start.components[k - 1],
            "X_train": X[train, :k], "X_valid": X[valid, :k],
            "z_train": Z[train, k - 1], "z_valid": Z[valid, k - 1],
        }
        for k in range(1, dim + 1)
    ]
    results = _run_component_tasks(tasks, cfg.workers)
    tmap = TriangularMap(tuple(r[0] for r in results), direction=PUSHFORWARD)
    trace = pd.DataFrame([row for r in results for row in r[1]], columns=TRACE_COLUMNS)
    residuals = [r[1][-1]["validation_objective"] for r in results]
    converged = all(res < cfg.regression_tol for res in residuals)
    evals = sum(r[2] for r in results)
    return TrainResult(tmap, trace, evals, converged=converged, warnings=[w for r in results for w in r[3]])


def atm_train_from_density(target: LogDensity, dim: int, cfg: Optional[AtmConfig] = None,
                           initial: Optional[TriangularMap] = None,
                           rng: Optional[np.random.Generator] = None,
                           require_both: bool = False,
                           test_samples: Optional[np.ndarray] = None) -> TrainResult:
    """Pushforward map T with T_# reference ~ target, adapted until the diagnostics pass.

    The objective uses antithetic reference samples; the stopping diagnostics
    use a held-out reference sample (``test_samples`` when given). With
    ``require_both`` both diagnostics must fall below their tolerances,
    otherwise either one suffices. When the budget runs out first, the
    iterate with the best diagnostics is returned.
    """
    cfg = cfg or AtmConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    reference = ReferenceDensity(dim)
    X = reference.antithetic_sample(cfg.n_reference, rng)
    if test_samples is None:
        X_test = reference.sample(cfg.n_test, rng)
    else:
        X_test = _check_samples(test_samples, "test samples")
        if X_test.shape[1] != dim:
            raise ValueError(f"test samples have dimension {X_test.shape[1]}, expected {dim}")
    tmap = initial or TriangularMap.identity(dim, cfg.family(), cfg.quad_order)
    if tmap.dim != dim:
        raise ValueError(f"initial map has dimension {tmap.dim}, expected {dim}")
    combine = max if require_both else min

    rows, warnings = [], []
    evals = 0
    selected = None
    best = (np.inf, tmap, None)
    converged = False
    for iteration in range(dim * cfg.max_terms):
        objective = DensityObjective(tmap, target, X)
        w, report = minimize(objective, objective.pack(tmap), cfg)
        if report.warning:
            warnings.append(report.message)
        tmap = objective.unpack(w)
        evals += objective.basis_evals
        diagnostics = compute_diagnostics(tmap, target, X_test, reference)
        evals += diagnostics.basis_evals
        rows.append(_trace_row(iteration, selected[0] if selected else 0, selected[1] if selected else None,
                               tmap.n_terms, report.value, var=diagnostics.variance_diag,
                               trace=diagnostics.trace_diag, evals=evals))
        logger.debug(f"from_density iteration {iteration}: {tmap.n_terms} terms, objective {report.value:.6g}, "
                     f"var {diagnostics.variance_diag:.3g}, trace {diagnostics.trace_diag:.3g}")
        score = combine(diagnostics.variance_diag / cfg.var_tol, diagnostics.trace_diag / cfg.trace_tol)
        if best[2] is None or score < best[0]:
            best = (score, tmap, diagnostics)
        if score < 1.0:
            converged = True
            break

        margins = {
            comp.k: comp.index_set.reduced_margin(cfg.max_order, cfg.max_total_order)
            for comp in tmap.components if len(comp.index_set) < cfg.max_terms
        }
        margins = {k: m for k, m in margins.items() if m}
        if not margins:
            break
        candidates = DensityObjective(tmap, target, X, extra=margins)
        extended = np.concatenate([
            np.concatenate([comp.coeffs, np.zeros(len(margins.get(comp.k, ())))]) for comp in tmap.components
        ])
        _, grad = candidates.value_grad(extended)
        evals += candidates.basis_evals
        best_score, selected = -1.0, None
        for comp, g in zip(tmap.components, candidates.split(grad)):
            margin = margins.get(comp.k, [])
            if not margin:
                continue
            scores = np.abs(g[len(comp.index_set):])
            j = int(np.argmax(scores))
            if scores[j] > best_score:
                best_score, selected = scores[j], (comp.k, margin[j])
        k, alpha = selected
        comps = list(tmap.components)
        comps[k - 1] = comps[k - 1].with_index(alpha)
        tmap = tmap.with_components(comps)

    _, tmap, diagnostics = best
    if not converged and diagnostics is not None:
        message = (f"from_density stopped at {tmap.n_terms} terms without meeting the tolerances "
                   f"(var {diagnostics.variance_diag:.3g}, trace {diagnostics.trace_diag:.3g})")
        logger.warning(message)
        warnings.append(message)
    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    return TrainResult(tmap, trace, evals, converged=converged, diagnostics=diagnostics, warnings=warnings)


def atm_train(kind: str, cfg: Optional[AtmConfig] = None, **data) -> TrainResult:
    """Dispatch to the ATM loop of the given objective kind.

    from_samples: X; regression: X, Z; from_density: target, dim.
    """
    if kind == FROM_SAMPLES:
        return atm_train_from_samples(data["X"], cfg, data.get("components"))
    if kind == REGRESSION:
        return atm_train_regression(data["X"], data["Z"], cfg, data.get("initial"))
    if kind == FROM_DENSITY:
        return atm_train_from_density(data["target"], data["dim"], cfg, data.get("initial"), data.get("rng"))
    raise ValueError(f"unknown objective kind {kind!r}")
