import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcflow.align import STRATEGIES, build_alignment


def test_examples():
    assert build_alignment(5, 3, "last").mapping == (2, 3, 4)
    assert build_alignment(5, 3, "first").mapping == (0, 1, 2)
    assert build_alignment(3, 5, "first").mapping == (0, 1, 2, 2, 2)
    assert build_alignment(3, 5, "last").mapping == (0, 0, 0, 1, 2)
    assert build_alignment(4, 2, "longest").mapping == (0, 2)


@pytest.mark.parametrize("strategy", STRATEGIES)
@given(n=st.integers(1, 512))
def test_equal_lengths_give_identity(strategy, n):
    assert build_alignment(n, n, strategy).mapping == tuple(range(n))


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        build_alignment(0, 3, "first")
    with pytest.raises(ValueError):
        build_alignment(3, 3, "middle")


def _reference(ls, lr, strategy):
    out = []
    for r in range(lr):
        if strategy == "first":
            out.append(min(r, ls - 1))
        elif strategy == "last":
            out.append(max(0, min(r + ls - lr, ls - 1)))
        else:
            out.append(r * ls // lr)
    return tuple(out)


@pytest.mark.parametrize("strategy", STRATEGIES)
@given(ls=st.integers(1, 64), lr=st.integers(1, 64))
def test_matches_scalar_reference(strategy, ls, lr):
    assert build_alignment(ls, lr, strategy).mapping == _reference(ls, lr, strategy)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_monotone_and_in_bounds_exhaustive(strategy):
    for ls in range(1, 513):
        for lr in range(1, 513):
            s = build_alignment(ls, lr, strategy).indices()
            assert len(s) == lr
            assert s[0] >= 0 and s[-1] <= ls - 1, (ls, lr)
            assert np.all(np.diff(s) >= 0), (ls, lr)
