"""
Multi-Index Sets

Downward-closed sets of polynomial multi-indices used to describe the terms
of a map component, with reduced-margin enumeration for adaptive enrichment.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import FrozenSet, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from app.errors import ClosureError

MultiIndex = Tuple[int, ...]


def _predecessors(alpha: MultiIndex) -> Iterator[MultiIndex]:
    for j, order in enumerate(alpha):
        if order > 0:
            yield alpha[:j] + (order - 1,) + alpha[j + 1:]


@dataclass(frozen=True)
class MultiIndexSet:
    """Immutable downward-closed multi-index set, members kept in lexicographic order."""

    dim: int
    members: Tuple[MultiIndex, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dimension must be positive, got {self.dim}")
        members = tuple(tuple(int(a) for a in alpha) for alpha in self.members)
        for alpha in members:
            if len(alpha) != self.dim:
                raise ValueError(f"multi-index {alpha} does not have dimension {self.dim}")
            if any(a < 0 for a in alpha):
                raise ValueError(f"multi-index {alpha} has negative entries")
        if len(set(members)) != len(members):
            raise ValueError("duplicate multi-indices")
        lookup = set(members)
        for alpha in members:
            for pred in _predecessors(alpha):
                if pred not in lookup:
                    raise ClosureError(f"closure violation: {alpha} present but {pred} missing")
        object.__setattr__(self, "members", tuple(sorted(members)))

    @classmethod
    def initial(cls, dim: int) -> "MultiIndexSet":
        """Zero index plus the linear term in the last variable."""
        zero = (0,) * dim
        diagonal = (0,) * (dim - 1) + (1,)
        return cls(dim, (zero, diagonal))

    @classmethod
    def from_array(cls, array) -> "MultiIndexSet":
        array = np.asarray(array, dtype=int)
        if array.ndim != 2:
            raise ValueError("index matrix must be two dimensional")
        return cls(array.shape[1], tuple(map(tuple, array.tolist())))

    def to_array(self) -> np.ndarray:
        return np.array(self.members, dtype=int).reshape(len(self.members), self.dim)

    @cached_property
    def _lookup(self) -> FrozenSet[MultiIndex]:
        return frozenset(self.members)

    def __contains__(self, alpha) -> bool:
        return tuple(alpha) in self._lookup

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[MultiIndex]:
        return iter(self.members)

    def position(self, alpha: MultiIndex) -> int:
        return self.members.index(tuple(alpha))

    @property
    def max_total_order(self) -> int:
        """Largest total degree among members (reported as the map order)."""
        return max((sum(alpha) for alpha in self.members), default=0)

    def reduced_margin(self, max_order: Optional[int] = None,
                       max_total_order: Optional[int] = None) -> List[MultiIndex]:
        """Indices outside the set whose predecessors all belong to it.

        Optional caps drop candidates whose per-variable or total order is
        too large. Output is sorted lexicographically.
        """
        if not self.members:
            raise ValueError("empty index set")
        candidates = set()
        for alpha in self.members:
            for j in range(self.dim):
                beta = alpha[:j] + (alpha[j] + 1,) + alpha[j + 1:]
                if beta not in self._lookup:
                    candidates.add(beta)
        margin = [
            beta for beta in candidates
            if all(pred in self._lookup for pred in _predecessors(beta))
        ]
        if max_order is not None:
            margin = [beta for beta in margin if max(beta) <= max_order]
        if max_total_order is not None:
            margin = [beta for beta in margin if sum(beta) <= max_total_order]
        return sorted(margin)

    def add_index(self, alpha: Iterable[int]) -> "MultiIndexSet":
        alpha = tuple(int(a) for a in alpha)
        if len(alpha) != self.dim or alpha not in self.reduced_margin():
            raise ClosureError(f"closure violation: {alpha} is not in the reduced margin")
        return MultiIndexSet(self.dim, self.members + (alpha,))

    def extend(self, alphas: Iterable[MultiIndex]) -> Tuple[MultiIndex, ...]:
        """Members followed by extra candidate indices (no closure check).

        Used to evaluate objective gradients at candidates appended with a
        zero coefficient; the result is a plain tuple, not a set.
        """
        return self.members + tuple(tuple(a) for a in alphas)


def reduced_margin(index_set: MultiIndexSet) -> List[MultiIndex]:
    return index_set.reduced_margin()


def add_index(index_set: MultiIndexSet, alpha: Iterable[int]) -> MultiIndexSet:
    return index_set.add_index(alpha)
