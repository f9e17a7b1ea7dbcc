import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from gridclear.convexsolver import (ConvexProgram, SolverError, constraint_values, kkt_residuals,
                                    solve, solve_or_raise)


def scalar_box():
    # min x^2 s.t. x >= 1
    prog = ConvexProgram(1, np.array([[2.0]]), np.zeros(1))
    prog.add_ineq("lo", [[-1.0]], [-1.0])
    return prog


def test_inequality_multiplier_sign():
    sol = solve(scalar_box())
    assert sol.optimal
    assert sol.z[0] == pytest.approx(1.0, abs=1e-7)
    assert sol.duals["lo"][0] == pytest.approx(2.0, abs=1e-6)


def test_equality_multiplier_sign():
    prog = ConvexProgram(2, 2 * np.eye(2), np.zeros(2), blocks={"x": slice(0, 1), "y": slice(1, 2)})
    prog.add_eq("sum", [[1.0, 1.0]], [2.0])
    sol = solve(prog)
    assert np.allclose(sol.z, [1.0, 1.0], atol=1e-8)
    assert sol.duals["sum"][0] == pytest.approx(-2.0, abs=1e-7)
    assert sol.primal["x"][0] == pytest.approx(1.0)
    assert sol.objective == pytest.approx(2.0, abs=1e-7)


def test_quadratic_constraint_unit_disc():
    # min -x - y s.t. x^2 + y^2 <= 1: optimum on the circle, multiplier 1/sqrt(2)
    prog = ConvexProgram(2, np.zeros((2, 2)), -np.ones(2))
    prog.add_quad("disc", np.zeros((1, 2)), [1.0], [np.array([0, 1])], [np.eye(2)])
    sol = solve(prog)
    assert np.allclose(sol.z, [2**-0.5] * 2, atol=1e-7)
    assert sol.duals["disc"][0] == pytest.approx(2**-0.5, abs=1e-6)


def test_infeasible_program_is_reported():
    prog = ConvexProgram(1, np.eye(1), np.zeros(1))
    prog.add_ineq("a", [[1.0]], [-1.0])
    prog.add_ineq("b", [[-1.0]], [-1.0])
    sol = solve(prog)
    assert sol.status == "infeasible"
    with pytest.raises(SolverError):
        solve_or_raise(prog)


def test_unbounded_program_is_reported():
    prog = ConvexProgram(1, np.zeros((1, 1)), np.array([1.0]))
    prog.add_ineq("hi", [[1.0]], [0.0])
    assert solve(prog).status == "unbounded"


def test_nonconvex_objective_is_rejected():
    prog = ConvexProgram(1, -np.eye(1), np.zeros(1))
    with pytest.raises(ValueError):
        prog.validate()


def test_residuals_are_computed_from_scratch():
    prog = scalar_box()
    good = kkt_residuals(prog, np.array([1.0]), {"lo": np.array([2.0])})
    assert good.within(1e-12)
    wrong = kkt_residuals(prog, np.array([1.0]), {"lo": np.array([1.0])})
    assert wrong.stationarity == pytest.approx(1.0)
    infeasible = kkt_residuals(prog, np.array([0.5]), {"lo": np.array([1.0])})
    assert infeasible.primal == pytest.approx(0.5)
    assert constraint_values(prog, np.array([3.0]))["lo"][0] == pytest.approx(-2.0)


def random_qp(seed, n, m_eq, m_in):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    c = rng.normal(size=n)
    z0 = rng.normal(size=n)  # strictly feasible by construction
    A = rng.normal(size=(m_eq, n))
    G = rng.normal(size=(m_in, n))
    h = G @ z0 + rng.uniform(0.1, 1.0, m_in)
    prog = ConvexProgram(n, P, c)
    if m_eq:
        prog.add_eq("eq", A, A @ z0)
    prog.add_ineq("in", G, h)
    return prog


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(0, 2), st.integers(1, 10))
def test_random_qps_satisfy_kkt(seed, n, m_eq, m_in):
    m_eq = min(m_eq, n - 1) if n > 1 else 0
    prog = random_qp(seed, n, m_eq, m_in)
    sol = solve(prog)
    assert sol.optimal
    assert kkt_residuals(prog, sol.z, sol.duals).within(1e-7)
    assert (sol.duals["in"] >= 0).all()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_matches_independent_conic_solver(seed):
    cp = pytest.importorskip("cvxpy")
    prog = random_qp(seed, 5, 1, 6)
    sol = solve(prog)
    z = cp.Variable(5)
    eq, ineq = prog.eq[0], prog.ineq[0]
    cons = [eq.A.toarray() @ z == eq.b, ineq.A.toarray() @ z <= ineq.b]
    obj = cp.Minimize(0.5 * cp.quad_form(z, cp.psd_wrap(prog.P)) + prog.c @ z)
    ref = cp.Problem(obj, cons)
    ref.solve(solver=cp.CLARABEL)
    assume(ref.status == cp.OPTIMAL)  # the reference can stop at its iteration limit
    assert np.allclose(sol.z, z.value, atol=1e-5)
    assert np.allclose(sol.duals["eq"], cons[0].dual_value, atol=1e-5)
    assert np.allclose(sol.duals["in"], cons[1].dual_value, atol=1e-5)
