import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_assignment
from parsefit.assignment import solve_assignment


def test_identity_like_costs():
    c = 1 - np.eye(5)
    a = solve_assignment(c)
    assert a.pairs == [(i, i) for i in range(5)]
    assert a.total_cost == 0


def test_rectangular_two_by_four():
    c = np.array([[4.0, 1, 3, 2], [2, 0, 5, 3]])
    a = solve_assignment(c)
    assert len(a) == 2
    assert a.total_cost == pytest.approx(brute_assignment(c))


def test_tall_matrix_matches_every_column():
    c = np.random.default_rng(0).random((6, 3))
    a = solve_assignment(c)
    assert sorted(a.cols.tolist()) == [0, 1, 2]
    assert a.total_cost == pytest.approx(brute_assignment(c), abs=1e-12)


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros(3), [[1.0, np.inf]]])
def test_rejects_bad_costs(bad):
    with pytest.raises(ValueError):
        solve_assignment(bad)


@settings(max_examples=80, deadline=None)
@given(
    st.integers(1, 5).flatmap(
        lambda r: st.integers(1, 5).flatmap(
            lambda c: arrays(float, (r, c), elements=st.floats(-100, 100, allow_nan=False))
        )
    )
)
def test_optimal_and_injective(c):
    a = solve_assignment(c)
    assert len(a) == min(c.shape)
    assert len(set(a.rows.tolist())) == len(set(a.cols.tolist())) == len(a)
    assert a.total_cost == pytest.approx(brute_assignment(c), abs=1e-9)
