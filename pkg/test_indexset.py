#!/usr/bin/env python3
"""
Tests for downward-closed multi-index sets
"""

import itertools

import numpy as np
import pytest

from app.errors import ClosureError
from app.indexset import MultiIndexSet, add_index, reduced_margin


def _brute_force_margin(index_set, max_total=4):
    members = set(index_set.members)
    out = []
    for beta in itertools.product(range(max_total + 1), repeat=index_set.dim):
        if beta in members or sum(beta) > max_total:
            continue
        preds = [beta[:j] + (beta[j] - 1,) + beta[j + 1:] for j in range(index_set.dim) if beta[j] > 0]
        if all(p in members for p in preds):
            out.append(beta)
    return sorted(out)


def test_reduced_margin_examples():
    assert reduced_margin(MultiIndexSet(2, ((0, 0),))) == [(0, 1), (1, 0)]
    assert reduced_margin(MultiIndexSet(1, ((0,), (1,)))) == [(2,)]
    assert reduced_margin(MultiIndexSet(2, ((0, 0), (1, 0)))) == [(0, 1), (2, 0)]


def test_reduced_margin_matches_brute_force():
    index_set = MultiIndexSet(3, ((0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1)))
    assert index_set.reduced_margin() == _brute_force_margin(index_set)


def test_reduced_margin_caps():
    index_set = MultiIndexSet(2, ((0, 0), (1, 0), (2, 0), (0, 1)))
    assert (3, 0) not in index_set.reduced_margin(max_order=2)
    assert (1, 1) in index_set.reduced_margin(max_order=2)
    assert index_set.reduced_margin(max_total_order=1) == []


def test_reduced_margin_of_empty_set_fails():
    with pytest.raises(ValueError, match="empty index set"):
        MultiIndexSet(2).reduced_margin()


def test_add_index_examples():
    assert add_index(MultiIndexSet(2, ((0, 0),)), (1, 0)).members == ((0, 0), (1, 0))
    assert add_index(MultiIndexSet(2, ((0, 0), (0, 1))), (0, 2)).members == ((0, 0), (0, 1), (0, 2))
    with pytest.raises(ClosureError, match="closure violation"):
        add_index(MultiIndexSet(1, ((0,),)), (2,))


def test_add_index_keeps_closure():
    rng = np.random.default_rng(3)
    index_set = MultiIndexSet.initial(3)
    for _ in range(15):
        margin = index_set.reduced_margin()
        index_set = index_set.add_index(margin[rng.integers(len(margin))])
        # the constructor re-checks closure
        MultiIndexSet(3, index_set.members)
    assert len(index_set) == 17


def test_constructor_rejects_non_closed_sets():
    with pytest.raises(ClosureError):
        MultiIndexSet(2, ((0, 0), (1, 1)))
    with pytest.raises(ValueError):
        MultiIndexSet(2, ((0, 0), (0, 0)))
    with pytest.raises(ValueError):
        MultiIndexSet(2, ((0, 0, 0),))


def test_members_sorted_and_array_form():
    index_set = MultiIndexSet(2, ((1, 0), (0, 1), (0, 0)))
    assert index_set.members == ((0, 0), (0, 1), (1, 0))
    assert MultiIndexSet.from_array(index_set.to_array()) == index_set
    assert (0, 1) in index_set and (1, 1) not in index_set
    assert index_set.position((1, 0)) == 2
    assert index_set.max_total_order == 1


def test_initial_set():
    assert MultiIndexSet.initial(3).members == ((0, 0, 0), (0, 0, 1))


if __name__ == "__main__":
    print("=" * 60)
    print("TESTING MULTI-INDEX SETS")
    print("=" * 60)
    raise SystemExit(pytest.main([__file__, "-v"]))
