"""
Polynomial Basis

Probabilists' Hermite polynomials with tangent-line continuation outside a
tail bound, their tensor products, and a shared counter of basis evaluations
used as the cost metric of map computations.
"""

import threading
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

HERMITE_KIND = "probabilists-hermite"


class BasisEvaluationCounter:
    """Thread-safe running total of multivariate basis evaluations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int):
        with self._lock:
            self._count += int(n)

    @property
    def count(self) -> int:
        return self._count

    def reset(self):
        with self._lock:
            self._count = 0


basis_counter = BasisEvaluationCounter()


def hermite_table(x: np.ndarray, max_order: int, deriv: int = 0) -> np.ndarray:
    """He_0..He_max_order (or their first/second derivatives) at x.

    Three-term recurrence He_{n+1} = x He_n - n He_{n-1}; returns an array of
    shape x.shape + (max_order + 1,).
    """
    x = np.asarray(x, dtype=float)
    table = np.empty(x.shape + (max_order + 1,))
    table[..., 0] = 1.0
    if max_order >= 1:
        table[..., 1] = x
    for n in range(1, max_order):
        table[..., n + 1] = x * table[..., n] - n * table[..., n - 1]
    if deriv == 0:
        return table
    out = np.zeros_like(table)
    orders = np.arange(max_order + 1)
    if deriv == 1:
        out[..., 1:] = orders[1:] * table[..., :-1]
    elif deriv == 2:
        out[..., 2:] = orders[2:] * (orders[2:] - 1) * table[..., :-2]
    else:
        raise ValueError(f"derivative order {deriv} not supported")
    return out


@dataclass(frozen=True)
class BasisFamily:
    """One-dimensional polynomial family shared by every term of a map."""

    kind: str = HERMITE_KIND
    max_order: int = 5
    tail_bound: float = 3.0

    def __post_init__(self):
        if self.kind != HERMITE_KIND:
            raise ValueError(f"unknown basis family {self.kind!r}")
        if self.max_order < 1:
            raise ValueError("max_order must be at least 1")
        if not self.tail_bound > 0:
            raise ValueError("tail_bound must be positive")

    def table(self, x: np.ndarray, max_order: int, deriv: int = 0) -> np.ndarray:
        """Linearized family values for orders 0..max_order at x.

        Beyond +-tail_bound each polynomial continues along its tangent line,
        so values and slopes stay continuous and second derivatives vanish.
        """
        if max_order > self.max_order:
            raise ValueError(f"order {max_order} exceeds max_order {self.max_order}")
        x = np.asarray(x, dtype=float)
        clipped = np.clip(x, -self.tail_bound, self.tail_bound)
        if deriv == 0:
            values = hermite_table(clipped, max_order, 0)
            slopes = hermite_table(clipped, max_order, 1)
            return values + slopes * (x - clipped)[..., None]
        if deriv == 1:
            return hermite_table(clipped, max_order, 1)
        inside = (np.abs(x) <= self.tail_bound)[..., None]
        return hermite_table(clipped, max_order, deriv) * inside

    def to_dict(self) -> dict:
        return {"kind": self.kind, "max_order": self.max_order, "tail_bound": self.tail_bound}

    @classmethod
    def from_dict(cls, data: dict) -> "BasisFamily":
        return cls(kind=data["kind"], max_order=int(data["max_order"]),
                   tail_bound=float(data["tail_bound"]))


def basis_matrix(family: BasisFamily, indices: np.ndarray, X: np.ndarray,
                 deriv: Optional[Sequence[int]] = None, count: bool = True) -> np.ndarray:
    """Tensor-product basis Phi_alpha(x) for every row of X and every index.

    deriv gives per-variable derivative orders (0, 1 or 2). Returns (N, m).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n_points, dim = X.shape
    indices = np.asarray(indices, dtype=int).reshape(-1, dim)
    deriv = np.zeros(dim, dtype=int) if deriv is None else np.asarray(deriv, dtype=int)
    out = np.ones((n_points, indices.shape[0]))
    for j in range(dim):
        orders = indices[:, j]
        if deriv[j] == 0 and not orders.any():
            continue
        table = family.table(X[:, j], max(int(orders.max()), 1), int(deriv[j]))
        out *= table[:, orders]
    if count:
        basis_counter.add(out.size)
    return out


def eval_1d(family: BasisFamily, order: int, x: float) -> float:
    if not 0 <= order <= family.max_order:
        raise ValueError(f"order {order} outside [0, {family.max_order}]")
    return float(family.table(np.array([x]), max(order, 1))[0, order])


def eval_multi(family: BasisFamily, alpha: Sequence[int],
               x: Sequence[float]) -> Tuple[float, np.ndarray]:
    """Value and gradient of the tensor-product term Phi_alpha at x."""
    alpha = np.asarray(alpha, dtype=int)
    x = np.asarray(x, dtype=float)
    if alpha.shape != x.shape:
        raise ValueError(f"dimension mismatch: index {alpha.shape} vs point {x.shape}")
    dim = x.size
    value = basis_matrix(family, alpha[None, :], x[None, :])[0, 0]
    gradient = np.empty(dim)
    for j in range(dim):
        deriv = np.zeros(dim, dtype=int)
        deriv[j] = 1
        gradient[j] = basis_matrix(family, alpha[None, :], x[None, :], deriv)[0, 0]
    return float(value), gradient
