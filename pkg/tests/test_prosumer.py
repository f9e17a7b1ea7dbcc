import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corpus import battery, random_prosumer
from gridclear.prosumer import (Boxes, LtiDynamics, ProsumerSpec, QuadraticUtility, condense,
                                condensed_cost, consumption, payoff, simulate, state_box_rows,
                                utility_total)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 2), st.integers(1, 6))
def test_condensed_cost_equals_simulated_utility(seed, d, m, T):
    rng = np.random.default_rng(seed)
    spec = random_prosumer(rng, d, m, T, 0.5)
    P, c, k = condensed_cost(spec)
    for _ in range(3):
        U = rng.uniform(-1, 1, (T, m))
        u = U.ravel()
        assert 0.5 * u @ P @ u + c @ u + k == pytest.approx(-utility_total(spec, U), rel=1e-10, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 2), st.integers(1, 6))
def test_condense_matches_simulation(seed, d, m, T):
    rng = np.random.default_rng(seed)
    spec = random_prosumer(rng, d, m, T, 0.5)
    U = rng.normal(size=(T, m))
    free, Gamma = condense(spec.dynamics, spec.x0, T)
    X = simulate(spec.dynamics, spec.x0, U)
    assert np.allclose(free.ravel() + Gamma @ U.ravel(), X.ravel(), atol=1e-12)


def test_state_box_rows_flag_violations():
    spec = battery([0.0, 0.0], x0=5.5, cap=6.0, delta=1.0)  # x+ = x + 0.9 u
    (G_lo, h_lo), (G_hi, h_hi) = state_box_rows(spec)
    inside = np.array([0.5, -1.0])  # x = 5.95, 5.05
    outside = np.array([1.0, 0.0])  # x = 6.4
    assert (G_hi @ inside <= h_hi).all() and (G_lo @ inside <= h_lo).all()
    assert not (G_hi @ outside <= h_hi).all()


def test_battery_trajectory_and_consumption():
    spec = battery([1.0, 1.0], x0=2.0, delta=0.5)
    X = simulate(spec.dynamics, spec.x0, [[1.0], [-0.5]])
    assert np.allclose(X.ravel(), [2.0, 2.45, 2.225])
    assert consumption(spec, [1.0]) == pytest.approx(0.5)
    assert consumption(spec, [0.0]) == 0.0


def test_payoff_adds_trading_income():
    spec = battery([1.0, 1.0], x0=2.0, target=2.0, delta=0.5)
    U = np.zeros((2, 1))
    assert utility_total(spec, U) == 0.0
    assert payoff(spec, [3.0, 1.0], U, [2.0, 2.0], 0.5) == pytest.approx(4.0)


def test_concavity_violations_are_listed():
    ut = QuadraticUtility([[1.0]], [[-1.0]], [[1.0]], [0.0], [0.0], [[-0.5]], [0.0])
    assert ut.concavity_violations() == ["Rf", "H"]


def test_validation_errors():
    dyn = LtiDynamics([[1.0]], [[1.0]])
    ut = QuadraticUtility([[1.0]], [[1.0]], [[1.0]], [0.0], [0.0], [[0.0]], [1.0])
    with pytest.raises(ValueError, match="initial state"):
        ProsumerSpec(dyn, Boxes([0.0], [1.0], [-1.0], [1.0]), ut, [0.0], 0.0, [2.0])
    with pytest.raises(ValueError):
        Boxes([1.0], [0.0], [-1.0], [1.0])
    with pytest.raises(ValueError):
        LtiDynamics([[1.0, 0.0]], [[1.0]])
    bad = QuadraticUtility(np.eye(2), [[1.0]], [[1.0]], [0.0], [0.0], [[0.0]], [1.0])
    with pytest.raises(ValueError):
        ProsumerSpec(dyn, Boxes([0.0], [1.0], [-1.0], [1.0]), bad, [0.0], 0.0, [0.5])


def test_scalars_broadcast_to_dimensions():
    dyn = LtiDynamics(np.eye(3), np.ones((3, 2)))
    ut = QuadraticUtility(np.eye(3), np.eye(2), np.eye(3), 0.0, 0.0, np.eye(2), 0.0)
    spec = ProsumerSpec(dyn, Boxes(-1.0, 1.0, -2.0, 2.0), ut, np.zeros(4), 0.0, 0.0)
    assert spec.boxes.x_lo.shape == (3,) and spec.boxes.u_hi.shape == (2,)
    assert spec.utility.h_lin.shape == (2,) and spec.T == 4
