"""
Transport Maps

Monotone triangular map components built with the integrated-softplus
rectifier, full Knothe-Rosenblatt maps with input standardization,
compositions of maps, and the reference/Gaussian densities they couple.

Component k of a map evaluates

    S_k(x) = f(x_<k, 0) + int_0^{x_k} softplus(d_k f(x_<k, t)) dt

where f is a linear combination of tensor-product Hermite terms. The integral
is computed by Gauss-Legendre quadrature on [0, clip(x_k)]; beyond the basis
tail bound the integrand is constant in t, so the remainder is added in closed
form.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import expit, roots_legendre

from app.errors import InversionError, NumericalError
from app.indexset import MultiIndex, MultiIndexSet
from app.polybasis import BasisFamily, basis_counter, basis_matrix

logger = logging.getLogger(__name__)

PULLBACK = "pullback"
PUSHFORWARD = "pushforward"
DIRECTIONS = (PULLBACK, PUSHFORWARD)

# softplus(IDENTITY_COEFF) == 1
IDENTITY_COEFF = float(np.log(np.e - 1.0))

MAX_BRACKET_DOUBLINGS = 60
MAX_ROOT_ITERATIONS = 200
ROOT_TOLERANCE = 1e-10

LOG_2PI = float(np.log(2.0 * np.pi))


# ----------------------------------------------------------------------
# softplus helpers
# ----------------------------------------------------------------------

def softplus(a):
    return np.logaddexp(0.0, a)


def softplus_inverse(s):
    """Inverse of softplus for s > 0."""
    s = np.asarray(s, dtype=float)
    return s + np.log(-np.expm1(-s))


def log_softplus(a):
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(a < -30.0, a, np.log(softplus(np.maximum(a, -30.0))))


def dlog_softplus(a):
    """Derivative of log(softplus(a))."""
    a = np.asarray(a, dtype=float)
    safe = np.maximum(a, -30.0)
    return np.where(a < -30.0, 1.0, expit(safe) / softplus(safe))


@lru_cache(maxsize=16)
def gauss_legendre(order: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = roots_legendre(order)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


# ----------------------------------------------------------------------
# Component
# ----------------------------------------------------------------------

class ComponentEval(NamedTuple):
    value: np.ndarray
    log_dk: np.ndarray
    dvalue_dw: Optional[np.ndarray] = None
    dlogdk_dw: Optional[np.ndarray] = None


class ComponentFeatures:
    """Basis quantities of one component at fixed inputs.

    Everything that depends only on the inputs is precomputed once, so the
    value and coefficient gradients for many coefficient vectors (one per
    optimizer iteration) are cheap matrix products. Each use is charged to
    the basis counter as if the basis had been evaluated again.
    """

    def __init__(self, family: BasisFamily, indices: np.ndarray, X: np.ndarray, quad_order: int):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not np.all(np.isfinite(X)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(X), axis=1))[0])
            raise NumericalError("non-finite input to map component", sample_index=bad)
        n, k = X.shape
        self.indices = np.asarray(indices, dtype=int).reshape(-1, k)
        self.n_points = n
        self.n_terms = self.indices.shape[0]

        xk = X[:, -1]
        xc = np.clip(xk, -family.tail_bound, family.tail_bound)
        self.tail = xk - xc

        nodes, weights = gauss_legendre(quad_order)
        t = xc[:, None] * (nodes[None, :] + 1.0) / 2.0
        self.quad_weights = weights[None, :] * xc[:, None] / 2.0

        deriv_k = np.zeros(k, dtype=int)
        deriv_k[-1] = 1
        base = X.copy()
        base[:, -1] = 0.0
        self.phi0 = basis_matrix(family, self.indices, base, count=False)
        quad_points = np.repeat(X, quad_order, axis=0)
        quad_points[:, -1] = t.ravel()
        self.dphi_quad = basis_matrix(family, self.indices, quad_points, deriv_k, count=False).reshape(n, quad_order, self.n_terms)
        self.dphi = basis_matrix(family, self.indices, X, deriv_k, count=False)
        self.n_evals = self.phi0.size + self.dphi_quad.size + self.dphi.size

    def charge(self):
        basis_counter.add(self.n_evals)

    def evaluate(self, coeffs: np.ndarray, gradient: bool = False) -> ComponentEval:
        self.charge()
        w = np.asarray(coeffs, dtype=float)
        a = self.dphi @ w
        h = self.dphi_quad @ w
        value = self.phi0 @ w + np.sum(self.quad_weights * softplus(h), axis=1) + self.tail * softplus(a)
        log_dk = log_softplus(a)
        if not gradient:
            return ComponentEval(value, log_dk)
        dvalue = (
            self.phi0
            + np.einsum("nq,nqm->nm", self.quad_weights * expit(h), self.dphi_quad)
            + (self.tail * expit(a))[:, None] * self.dphi
        )
        dlogdk = dlog_softplus(a)[:, None] * self.dphi
        return ComponentEval(value, log_dk, dvalue, dlogdk)


@dataclass(frozen=True, eq=False)
class MapComponent:
    """One monotone component S_k acting on the first k (standardized) variables."""

    index_set: MultiIndexSet
    coeffs: np.ndarray
    family: BasisFamily = field(default_factory=BasisFamily)
    quad_order: int = 32

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float).ravel()
        if coeffs.size != len(self.index_set):
            raise ValueError(f"{coeffs.size} coefficients for {len(self.index_set)} terms")
        if self.quad_order < 1:
            raise ValueError("quad_order must be positive")
        if self.index_set.members and max(max(alpha) for alpha in self.index_set) > self.family.max_order:
            raise ValueError("index set exceeds the basis family max_order")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def k(self) -> int:
        return self.index_set.dim

    @classmethod
    def identity(cls, k: int, family: Optional[BasisFamily] = None, quad_order: int = 32) -> "MapComponent":
        """S_k(x) = x_k, on the initial index set {0, e_k}."""
        index_set = MultiIndexSet.initial(k)
        coeffs = np.zeros(len(index_set))
        coeffs[index_set.position((0,) * (k - 1) + (1,))] = IDENTITY_COEFF
        return cls(index_set, coeffs, family or BasisFamily(), quad_order)

    @classmethod
    def affine(cls, offset: float, slopes: Sequence[float], family: Optional[BasisFamily] = None,
               quad_order: int = 32) -> "MapComponent":
        """S_k(x) = offset + sum_j slopes[j] x_j with slopes[-1] > 0."""
        slopes = np.asarray(slopes, dtype=float)
        k = slopes.size
        if not slopes[-1] > 0:
            raise ValueError("diagonal slope must be positive")
        zero = (0,) * k
        linear = [zero[:j] + (1,) + zero[j + 1:] for j in range(k)]
        index_set = MultiIndexSet(k, (zero,) + tuple(alpha for j, alpha in enumerate(linear) if j == k - 1 or slopes[j] != 0))
        coeffs = np.zeros(len(index_set))
        coeffs[index_set.position(zero)] = offset
        for j, alpha in enumerate(linear):
            if alpha in index_set:
                coeffs[index_set.position(alpha)] = slopes[j] if j < k - 1 else softplus_inverse(slopes[j])
        return cls(index_set, coeffs, family or BasisFamily(), quad_order)

    def with_coeffs(self, coeffs: np.ndarray) -> "MapComponent":
        return MapComponent(self.index_set, coeffs, self.family, self.quad_order)

    def with_index(self, alpha: MultiIndex) -> "MapComponent":
        """Add alpha (from the reduced margin) with a zero coefficient."""
        index_set = self.index_set.add_index(alpha)
        coeffs = np.zeros(len(index_set))
        for beta, w in zip(self.index_set, self.coeffs):
            coeffs[index_set.position(beta)] = w
        return MapComponent(index_set, coeffs, self.family, self.quad_order)

    def features(self, X: np.ndarray, extra: Sequence[MultiIndex] = ()) -> ComponentFeatures:
        indices = np.array(self.index_set.extend(extra), dtype=int).reshape(-1, self.k)
        return ComponentFeatures(self.family, indices, X, self.quad_order)

    def evaluate(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Values S_k(x) and diagonal derivatives d_k S_k(x) > 0."""
        result = self.features(X).evaluate(self.coeffs)
        return result.value, np.exp(result.log_dk)

    def log_dk(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        a = basis_matrix(self.family, self.index_set.to_array(), X, self._unit(self.k - 1)) @ self.coeffs
        return log_softplus(a)

    def _unit(self, *positions: int) -> np.ndarray:
        deriv = np.zeros(self.k, dtype=int)
        for j in positions:
            deriv[j] += 1
        return deriv

    def grad_input(self, X: np.ndarray) -> np.ndarray:
        """Partial derivatives of S_k in each of its k inputs, shape (N, k).

        Prefix derivatives differentiate under the integral sign; the last
        column is the diagonal derivative itself.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n, k = X.shape
        idx = self.index_set.to_array()
        w = self.coeffs
        feats = self.features(X)
        feats.charge()
        a = feats.dphi @ w
        h = feats.dphi_quad @ w
        out = np.empty((n, k))
        out[:, -1] = softplus(a)
        if k == 1:
            return out
        base = X.copy()
        base[:, -1] = 0.0
        quad_points = np.repeat(X, self.quad_order, axis=0)
        nodes, _ = gauss_legendre(self.quad_order)
        xc = X[:, -1] - feats.tail
        quad_points[:, -1] = (xc[:, None] * (nodes[None, :] + 1.0) / 2.0).ravel()
        slope_quad = feats.quad_weights * expit(h)
        slope_tail = feats.tail * expit(a)
        for j in range(k - 1):
            d_base = basis_matrix(self.family, idx, base, self._unit(j)) @ w
            d_quad = (basis_matrix(self.family, idx, quad_points, self._unit(j, k - 1)) @ w).reshape(n, self.quad_order)
            d_x = basis_matrix(self.family, idx, X, self._unit(j, k - 1)) @ w
            out[:, j] = d_base + np.sum(slope_quad * d_quad, axis=1) + slope_tail * d_x
        return out

    def grad_log_dk(self, X: np.ndarray) -> np.ndarray:
        """Gradient of log(d_k S_k) in the k inputs, shape (N, k)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n, k = X.shape
        idx = self.index_set.to_array()
        a = basis_matrix(self.family, idx, X, self._unit(k - 1)) @ self.coeffs
        ratio = dlog_softplus(a)
        out = np.empty((n, k))
        for j in range(k):
            out[:, j] = ratio * (basis_matrix(self.family, idx, X, self._unit(j, k - 1)) @ self.coeffs)
        return out

    def invert(self, prefix: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Solve S_k(prefix, x_k) = z for x_k, row by row.

        Bracket expansion by doubling from [-1, 1], then Newton steps
        safeguarded by bisection inside the bracket.
        """
        z = np.atleast_1d(np.asarray(z, dtype=float))
        n = z.size
        prefix = np.asarray(prefix, dtype=float).reshape(n, self.k - 1)
        if not np.all(np.isfinite(z)):
            raise NumericalError("non-finite inversion target", sample_index=int(np.flatnonzero(~np.isfinite(z))[0]))

        def value_at(rows, xk):
            points = np.column_stack([prefix[rows], xk])
            result = self.features(points).evaluate(self.coeffs)
            return result.value, np.exp(result.log_dk)

        rows = np.arange(n)
        lo = -np.ones(n)
        hi = np.ones(n)
        for attempt in range(MAX_BRACKET_DOUBLINGS + 1):
            low_bad = value_at(rows, lo)[0] > z
            high_bad = value_at(rows, hi)[0] < z
            if not (low_bad.any() or high_bad.any()):
                break
            if attempt == MAX_BRACKET_DOUBLINGS:
                first = int(np.flatnonzero(low_bad | high_bad)[0])
                raise InversionError("inversion bracket failure", sample_index=first)
            hi[low_bad] = lo[low_bad]
            lo[low_bad] *= 2.0
            lo[high_bad] = hi[high_bad]
            hi[high_bad] *= 2.0

        x = 0.5 * (lo + hi)
        active = np.ones(n, dtype=bool)
        for _ in range(MAX_ROOT_ITERATIONS):
            rows = np.flatnonzero(active)
            if rows.size == 0:
                return x
            value, dk = value_at(rows, x[rows])
            residual = value - z[rows]
            converged = (np.abs(residual) < ROOT_TOLERANCE) | (hi[rows] - lo[rows] < 1e-14 * (1.0 + np.abs(x[rows])))
            above = residual > 0
            hi[rows[above]] = x[rows[above]]
            lo[rows[~above]] = x[rows[~above]]
            with np.errstate(divide="ignore", invalid="ignore"):
                newton = x[rows] - residual / dk
            outside = ~np.isfinite(newton) | (newton <= lo[rows]) | (newton >= hi[rows])
            step = np.where(outside, 0.5 * (lo[rows] + hi[rows]), newton)
            x[rows[~converged]] = step[~converged]
            active[rows[converged]] = False
        if active.any():
            raise InversionError("inversion did not converge", sample_index=int(np.flatnonzero(active)[0]))
        return x

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "indices": self.index_set.to_array().tolist(),
            "coeffs": self.coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, family: BasisFamily, quad_order: int) -> "MapComponent":
        k = int(data["k"])
        indices = np.asarray(data["indices"], dtype=int).reshape(-1, k)
        coeffs = np.asarray(data["coeffs"], dtype=float)
        index_set = MultiIndexSet(k, tuple(map(tuple, indices.tolist())))
        # the set re-sorts members; keep coefficients aligned
        aligned = np.zeros(len(index_set))
        for alpha, w in zip(map(tuple, indices.tolist()), coeffs):
            aligned[index_set.position(alpha)] = w
        return cls(index_set, aligned, family, quad_order)


# ----------------------------------------------------------------------
# Densities
# ----------------------------------------------------------------------

class LogDensity(Protocol):
    dim: int

    def log_density(self, X: np.ndarray) -> np.ndarray: ...

    def grad_log_density(self, X: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ReferenceDensity:
    """Standard normal reference on R^dim."""

    dim: int

    def log_density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return -0.5 * np.sum(X ** 2, axis=1) - 0.5 * self.dim * LOG_2PI

    def grad_log_density(self, X: np.ndarray) -> np.ndarray:
        return -np.atleast_2d(X)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.dim))

    def antithetic_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n samples in (x, -x) pairs; the sample mean is exactly zero for even n."""
        half = rng.standard_normal(((n + 1) // 2, self.dim))
        return np.vstack([half, -half])[:n]


class GaussianDensity:
    """Multivariate normal N(mean, cov), used for priors and proposals."""

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        self.dim = self.mean.size
        self.cov = cov.reshape(self.dim, self.dim) if cov.size == self.dim ** 2 else np.diag(np.broadcast_to(cov, self.dim))
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as e:
            raise ValueError("covariance must be symmetric positive definite") from e
        self.precision = np.linalg.inv(self.cov)
        self._log_norm = -0.5 * self.dim * LOG_2PI - np.sum(np.log(np.diag(self.chol)))

    def log_density(self, X: np.ndarray) -> np.ndarray:
        R = np.atleast_2d(X) - self.mean
        return self._log_norm - 0.5 * np.einsum("ni,ij,nj->n", R, self.precision, R)

    def grad_log_density(self, X: np.ndarray) -> np.ndarray:
        return -(np.atleast_2d(X) - self.mean) @ self.precision

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self.chol.T


# ----------------------------------------------------------------------
# Triangular map
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriangularMap:
    """Lower-triangular map S(x) = [S_1(u_1), ..., S_d(u_1..u_d)], u = (x - shift) / scale.

    direction records how the map was trained: "pullback" maps send target
    samples to the reference, "pushforward" maps send reference samples to
    the target.
    """

    components: Tuple[MapComponent, ...]
    shift: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    direction: str = PULLBACK

    def __post_init__(self):
        components = tuple(self.components)
        if not components:
            raise ValueError("a map needs at least one component")
        for k, comp in enumerate(components, start=1):
            if comp.k != k:
                raise ValueError(f"component {k} acts on {comp.k} variables")
        dim = len(components)
        shift = np.zeros(dim) if self.shift is None else np.asarray(self.shift, dtype=float).ravel()
        scale = np.ones(dim) if self.scale is None else np.asarray(self.scale, dtype=float).ravel()
        if shift.size != dim or scale.size != dim:
            raise ValueError("standardization vectors must match the map dimension")
        if np.any(scale <= 0):
            raise ValueError("standardization scales must be positive")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scale", scale)

    # construction ------------------------------------------------------

    @classmethod
    def identity(cls, dim: int, family: Optional[BasisFamily] = None, quad_order: int = 32,
                 direction: str = PUSHFORWARD) -> "TriangularMap":
        family = family or BasisFamily()
        return cls(tuple(MapComponent.identity(k, family, quad_order) for k in range(1, dim + 1)),
                   direction=direction)

    @classmethod
    def affine(cls, mean, chol, family: Optional[BasisFamily] = None, quad_order: int = 32) -> "TriangularMap":
        """Pushforward map x -> mean + L x for a lower-triangular L with positive diagonal."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        chol = np.asarray(chol, dtype=float).reshape(mean.size, mean.size)
        family = family or BasisFamily()
        components = tuple(
            MapComponent.affine(mean[k], chol[k, :k + 1], family, quad_order) for k in range(mean.size)
        )
        return cls(components, direction=PUSHFORWARD)

    @classmethod
    def diagonal_affine(cls, shift, scale, family: Optional[BasisFamily] = None,
                        quad_order: int = 32) -> "TriangularMap":
        scale = np.atleast_1d(np.asarray(scale, dtype=float))
        return cls.affine(shift, np.diag(scale), family, quad_order)

    def with_components(self, components: Sequence[MapComponent]) -> "TriangularMap":
        return TriangularMap(tuple(components), self.shift, self.scale, self.direction)

    # properties -------------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.components)

    @property
    def family(self) -> BasisFamily:
        return self.components[0].family

    @property
    def quad_order(self) -> int:
        return self.components[0].quad_order

    @property
    def n_terms(self) -> int:
        return sum(len(comp.index_set) for comp in self.components)

    @property
    def order(self) -> int:
        """Largest total degree over all components."""
        return max(comp.index_set.max_total_order for comp in self.components)

    # evaluation -------------------------------------------------------

    def standardize(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} columns, got {X.shape[1]}")
        return (X - self.shift) / self.scale

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        U = self.standardize(X)
        return np.column_stack([comp.evaluate(U[:, :comp.k])[0] for comp in self.components])

    def log_det(self, X: np.ndarray) -> np.ndarray:
        """log |det grad S(x)|, including the standardization."""
        U = self.standardize(X)
        total = sum(comp.log_dk(U[:, :comp.k]) for comp in self.components)
        return total - np.sum(np.log(self.scale))

    def evaluate_log_det(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        U = self.standardize(X)
        values, log_det = [], np.full(U.shape[0], -np.sum(np.log(self.scale)))
        for comp in self.components:
            value, dk = comp.evaluate(U[:, :comp.k])
            values.append(value)
            log_det = log_det + np.log(dk)
        return np.column_stack(values), log_det

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        """Solve S(x) = z one component at a time."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} columns, got {Z.shape[1]}")
        U = np.empty_like(Z)
        for comp in self.components:
            k = comp.k
            U[:, k - 1] = comp.invert(U[:, :k - 1], Z[:, k - 1])
        return self.shift + self.scale * U

    def jacobian(self, X: np.ndarray) -> np.ndarray:
        """Lower-triangular Jacobians, shape (N, d, d)."""
        U = self.standardize(X)
        J = np.zeros((U.shape[0], self.dim, self.dim))
        for comp in self.components:
            k = comp.k
            J[:, k - 1, :k] = comp.grad_input(U[:, :k])
        return J / self.scale[None, None, :]

    def vjp(self, X: np.ndarray, G: np.ndarray) -> np.ndarray:
        """Rows of G^T grad S(x), shape (N, d)."""
        U = self.standardize(X)
        G = np.atleast_2d(G)
        out = np.zeros_like(U)
        for comp in self.components:
            k = comp.k
            out[:, :k] += G[:, k - 1:k] * comp.grad_input(U[:, :k])
        return out / self.scale

    def grad_log_det(self, X: np.ndarray) -> np.ndarray:
        U = self.standardize(X)
        out = np.zeros_like(U)
        for comp in self.components:
            out[:, :comp.k] += comp.grad_log_dk(U[:, :comp.k])
        return out / self.scale

    def log_pullback(self, target: LogDensity, X: np.ndarray) -> np.ndarray:
        """log of S^# target at x: log target(S(x)) + log det grad S(x)."""
        Z, log_det = self.evaluate_log_det(X)
        return target.log_density(Z) + log_det

    def grad_log_pullback(self, target: LogDensity, X: np.ndarray) -> np.ndarray:
        Z = self.evaluate(X)
        return self.vjp(X, target.grad_log_density(Z)) + self.grad_log_det(X)

    def log_pushforward(self, reference: LogDensity, Y: np.ndarray) -> np.ndarray:
        """log of S_# reference at y, via the inverse map."""
        X = self.inverse(Y)
        return reference.log_density(X) - self.log_det(X)

    def transport(self, E: np.ndarray) -> np.ndarray:
        """Send reference samples to the target in the trained direction."""
        if self.direction == PUSHFORWARD:
            return self.evaluate(E)
        return self.inverse(E)

    def transport_log_det(self, E: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if self.direction == PUSHFORWARD:
            return self.evaluate_log_det(E)
        X = self.inverse(E)
        return X, -self.log_det(X)

    # serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "direction": self.direction,
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "family": self.family.to_dict(),
            "quad_order": self.quad_order,
            "components": [comp.to_dict() for comp in self.components],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TriangularMap":
        family = BasisFamily.from_dict(data["family"])
        quad_order = int(data["quad_order"])
        components = tuple(MapComponent.from_dict(c, family, quad_order) for c in data["components"])
        if len(components) != int(data["dim"]):
            raise ValueError("component count does not match map dimension")
        return cls(components, np.asarray(data["shift"]), np.asarray(data["scale"]), data["direction"])


# ----------------------------------------------------------------------
# Composition
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ComposedMap:
    """T_1 o T_2 o ... o T_t; reference samples pass through T_t first."""

    maps: Tuple[TriangularMap, ...]

    def __post_init__(self):
        maps = tuple(self.maps)
        if not maps:
            raise ValueError("a composition needs at least one map")
        if len({m.dim for m in maps}) != 1:
            raise ValueError("all maps of a composition must share dimension")
        object.__setattr__(self, "maps", maps)

    def __len__(self) -> int:
        return len(self.maps)

    @property
    def dim(self) -> int:
        return self.maps[0].dim

    @property
    def n_terms(self) -> int:
        return sum(m.n_terms for m in self.maps)

    @property
    def order(self) -> int:
        return max(m.order for m in self.maps)

    def then(self, inner: TriangularMap) -> "ComposedMap":
        """self o inner."""
        return ComposedMap(self.maps + (inner,))

    def transport(self, E: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(E, dtype=float))
        for m in reversed(self.maps):
            X = m.transport(X)
        return X

    def log_pullback(self, target: LogDensity, E: np.ndarray) -> np.ndarray:
        """log of (composition)^# target at reference points E."""
        X = np.atleast_2d(np.asarray(E, dtype=float))
        total = np.zeros(X.shape[0])
        for m in reversed(self.maps):
            X, log_det = m.transport_log_det(X)
            total += log_det
        return target.log_density(X) + total

    def log_pullback_and_grad(self, target: LogDensity, E: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Value and input gradient of the pulled-back log-density.

        One forward sweep stores the intermediate points; the reverse sweep
        accumulates g <- vjp(T_i, g) + grad log det T_i.
        """
        if any(m.direction != PUSHFORWARD for m in self.maps):
            raise ValueError("gradients need every map of the composition in pushforward direction")
        X = np.atleast_2d(np.asarray(E, dtype=float))
        inputs: List[np.ndarray] = []
        total = np.zeros(X.shape[0])
        for m in reversed(self.maps):
            inputs.append(X)
            X, log_det = m.evaluate_log_det(X)
            total += log_det
        value = target.log_density(X) + total
        g = target.grad_log_density(X)
        for m, x_in in zip(self.maps, reversed(inputs)):
            g = m.vjp(x_in, g) + m.grad_log_det(x_in)
        return value, g

    def forward(self, E: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Output and the input of every member map, innermost first."""
        if any(m.direction != PUSHFORWARD for m in self.maps):
            raise ValueError("gradients need every map of the composition in pushforward direction")
        X = np.atleast_2d(np.asarray(E, dtype=float))
        inputs = []
        for m in reversed(self.maps):
            inputs.append(X)
            X = m.evaluate(X)
        return X, inputs

    def vjp_from_inputs(self, inputs: List[np.ndarray], G: np.ndarray) -> np.ndarray:
        g = np.atleast_2d(G)
        for m, x_in in zip(self.maps, reversed(inputs)):
            g = m.vjp(x_in, g)
        return g

    def vjp(self, E: np.ndarray, G: np.ndarray) -> np.ndarray:
        """G^T times the Jacobian of the whole composition at E."""
        _, inputs = self.forward(E)
        return self.vjp_from_inputs(inputs, G)


# ----------------------------------------------------------------------
# Single-point entry points
# ----------------------------------------------------------------------

def eval_component(component: MapComponent, x: Sequence[float]) -> Tuple[float, float]:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != component.k:
        raise ValueError(f"component expects {component.k} inputs")
    value, dk = component.evaluate(x)
    return float(value[0]), float(dk[0])


def invert_component(component: MapComponent, x_prefix: Sequence[float], z: float) -> float:
    prefix = np.asarray(x_prefix, dtype=float).reshape(1, component.k - 1)
    return float(component.invert(prefix, np.array([z]))[0])


def grad_coeff(component: MapComponent, x: Sequence[float],
               candidates: Sequence[MultiIndex] = ()) -> Tuple[np.ndarray, np.ndarray]:
    """(d S_k / dw, d log d_k S_k / dw) at x; candidate indices are appended with zero coefficients."""
    X = np.asarray(x, dtype=float).reshape(1, -1)
    coeffs = np.concatenate([component.coeffs, np.zeros(len(candidates))])
    result = component.features(X, candidates).evaluate(coeffs, gradient=True)
    return result.dvalue_dw[0], result.dlogdk_dw[0]


def grad_input(S: TriangularMap, x: Sequence[float]) -> np.ndarray:
    return S.jacobian(np.asarray(x, dtype=float).reshape(1, -1))[0]


def log_pullback(S: TriangularMap, reference: LogDensity, x: Sequence[float]) -> float:
    return float(S.log_pullback(reference, np.asarray(x, dtype=float).reshape(1, -1))[0])


def pushforward_sample(M: ComposedMap, eps: Sequence[float]) -> np.ndarray:
    return M.transport(np.asarray(eps, dtype=float).reshape(1, -1))[0]
