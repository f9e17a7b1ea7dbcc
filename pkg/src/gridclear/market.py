"""Social-welfare clearing, locational prices and prosumer best responses.

Prices are quoted per kWh.  The balance constraint is written as
``-sum_i p_i(t) = 0`` and voltage / trading rows in their natural ``<= 0``
form, so the solver multipliers map to prices as

* energy price ``alpha(t) = y_balance(t) / delta``,
* voltage prices ``xi_lo(t), xi_hi(t) = lam_voltage(t) / delta``,
* trading multiplier ``psi_i(t) = lam_trade`` (unscaled),

and ``lambda_i(t) = alpha(t) + sum_k (xi_lo_k(t) - xi_hi_k(t)) R_ki``.
Stationarity in ``p_i(t)`` then reads ``psi_i(t) = lambda_i(t)``, which is
why prices at a welfare optimum are never negative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import convexsolver as cs
from .network import (LineFlows, RadialNetwork, VoltageEnvelope, adjusted_voltage_bounds,
                      build_sensitivity_matrices, recover_line_flows)
from .prosumer import ProsumerSpec, condensed_cost, consumption, payoff, simulate, state_box_rows

log = logging.getLogger(__name__)

NEGATIVE_PRICE_TOL = 1e-6


class MarketConsistencyError(RuntimeError):
    """Cleared prices break an identity that must hold at a welfare optimum."""


@dataclass(frozen=True)
class Scenario:
    network: RadialNetwork
    prosumers: tuple[ProsumerSpec, ...]
    delta: float
    v0: float
    frac_lo: np.ndarray  # squared-voltage fractions of v0, scalars broadcast per node
    frac_hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "prosumers", tuple(self.prosumers))
        for name in ("frac_lo", "frac_hi"):
            frac = np.broadcast_to(np.asarray(getattr(self, name), float), (self.network.n,)).copy()
            object.__setattr__(self, name, frac)
        if not self.prosumers:
            raise ValueError("scenario has no prosumers")
        if len(self.prosumers) != self.network.n:
            raise ValueError(f"{len(self.prosumers)} prosumers for {self.network.n} network nodes")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        T = {sp_.T for sp_ in self.prosumers}
        if len(T) != 1:
            raise ValueError(f"supply series lengths differ: {sorted(T)}")
        if self.T < 1:
            raise ValueError("horizon must have at least one step")

    @property
    def n(self) -> int:
        return self.network.n

    @property
    def T(self) -> int:
        return self.prosumers[0].T

    @cached_property
    def R(self) -> np.ndarray:
        return build_sensitivity_matrices(self.network).R

    @cached_property
    def envelope(self) -> VoltageEnvelope:
        q = np.array([p.q for p in self.prosumers])
        return adjusted_voltage_bounds(self.network, self.v0, (self.frac_lo, self.frac_hi), q)

    @property
    def q(self) -> np.ndarray:
        return np.array([p.q for p in self.prosumers])

    def supply(self) -> np.ndarray:
        """Net supply a_i(t) as an (n, T) array."""
        return np.array([p.supply for p in self.prosumers])


@dataclass
class LocationalPrices:
    lam: np.ndarray  # (n, T)
    alpha: np.ndarray | None = None  # (T,)
    xi_lo: np.ndarray | None = None  # (n, T)
    xi_hi: np.ndarray | None = None

    @property
    def has_decomposition(self) -> bool:
        return self.alpha is not None and self.xi_lo is not None and self.xi_hi is not None

    @staticmethod
    def compose(R, alpha, xi_lo, xi_hi) -> np.ndarray:
        """``alpha(t) + sum_k (xi_lo_k(t) - xi_hi_k(t)) R_ki`` as an (n, T) array."""
        return np.asarray(alpha)[None, :] + np.asarray(R).T @ (np.asarray(xi_lo) - np.asarray(xi_hi))

    @classmethod
    def from_decomposition(cls, R, alpha, xi_lo, xi_hi) -> "LocationalPrices":
        return cls(cls.compose(R, alpha, xi_lo, xi_hi), np.asarray(alpha), np.asarray(xi_lo),
                   np.asarray(xi_hi))


@dataclass
class MarketOutcome:
    scenario: Scenario
    solution: cs.PrimalDualSolution
    prices: LocationalPrices
    inputs: list[np.ndarray]  # per prosumer, (T, m)
    states: list[np.ndarray]  # per prosumer, (T+1, d)
    injections: np.ndarray  # (n, T), kW
    welfare: float
    flows: LineFlows
    voltage_constrained: bool = True
    degenerate: bool = False
    min_norm_prices: LocationalPrices | None = None

    @property
    def v_tilde(self) -> np.ndarray:
        """``sum_k R_ik p_k(t)`` as an (n, T) array."""
        return self.scenario.R @ self.injections

    def payoffs(self) -> np.ndarray:
        s = self.scenario
        return np.array([payoff(spec, self.prices.lam[i], self.inputs[i], self.injections[i], s.delta)
                         for i, spec in enumerate(s.prosumers)])


def _blocks(s: Scenario):
    blocks = {}
    k = 0
    for i, spec in enumerate(s.prosumers, start=1):
        blocks[f"U{i}"] = slice(k, k + spec.m * s.T)
        k += spec.m * s.T
        blocks[f"p{i}"] = slice(k, k + s.T)
        k += s.T
    return blocks, k


def _trading_rows(prog: cs.ConvexProgram, name: str, spec: ProsumerSpec, u_sl: slice,
                  p_sl: slice, delta: float, T: int):
    """Add ``p(t) delta + h(u(t)) - a(t) <= 0`` for every t."""
    m = spec.m
    ut = spec.utility
    G = sp.lil_matrix((T, prog.n))
    for t in range(T):
        cols = np.arange(u_sl.start + t * m, u_sl.start + (t + 1) * m)
        G[t, cols] = ut.h_lin
        if p_sl is not None:
            G[t, p_sl.start + t] = delta
    if np.any(ut.H != 0):
        index = [np.arange(u_sl.start + t * m, u_sl.start + (t + 1) * m) for t in range(T)]
        prog.add_quad(name, G.tocsr(), spec.supply.copy(), index, [ut.H] * T)
    else:
        prog.add_ineq(name, G.tocsr(), spec.supply.copy())


def _local_rows(prog: cs.ConvexProgram, i: int, spec: ProsumerSpec, u_sl: slice, T: int):
    m = spec.m
    (Glo, hlo), (Ghi, hhi) = state_box_rows(spec, T)
    for name, Gx, hx in ((f"x_lo{i}", Glo, hlo), (f"x_hi{i}", Ghi, hhi)):
        G = sp.lil_matrix((hx.size, prog.n))
        G[:, u_sl] = Gx
        prog.add_ineq(name, G.tocsr(), hx)
    b = spec.boxes
    eye = sp.eye(T * m, format="csr")
    lo = np.tile(b.u_lo, T)
    hi = np.tile(b.u_hi, T)
    klo, khi = np.isfinite(lo), np.isfinite(hi)
    G = sp.hstack([sp.csr_matrix((T * m, u_sl.start)), -eye,
                   sp.csr_matrix((T * m, prog.n - u_sl.stop))], format="csr")
    prog.add_ineq(f"u_lo{i}", G[klo], -lo[klo])
    prog.add_ineq(f"u_hi{i}", -G[khi], hi[khi])


def check_concavity(s: Scenario) -> None:
    for i, spec in enumerate(s.prosumers, start=1):
        bad = spec.utility.concavity_violations()
        if bad:
            raise ValueError(f"prosumer {i}: {', '.join(bad)} not positive semidefinite")


def _assemble(s: Scenario, voltage: bool) -> cs.ConvexProgram:
    check_concavity(s)
    T, n = s.T, s.n
    blocks, N = _blocks(s)
    P = np.zeros((N, N))
    c = np.zeros(N)
    const = 0.0
    for i, spec in enumerate(s.prosumers, start=1):
        sl = blocks[f"U{i}"]
        Pi, ci, ki = condensed_cost(spec, T)
        P[sl, sl] = Pi
        c[sl] = ci
        const += ki
    prog = cs.ConvexProgram(N, P, c, const, blocks)

    # P_all @ z stacks p(t) for every node, row (t, i) -> t * n + i
    rows, cols = [], []
    for i in range(1, n + 1):
        sl = blocks[f"p{i}"]
        for t in range(T):
            rows.append(t * n + i - 1)
            cols.append(sl.start + t)
    P_all = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n * T, N))
    sum_rows = sp.kron(sp.eye(T), np.ones((1, n)), format="csr")
    prog.add_eq("balance", -(sum_rows @ P_all), np.zeros(T))

    for i, spec in enumerate(s.prosumers, start=1):
        _trading_rows(prog, f"trade{i}", spec, blocks[f"U{i}"], blocks[f"p{i}"], s.delta, T)
        _local_rows(prog, i, spec, blocks[f"U{i}"], T)

    if voltage:
        env = s.envelope
        RP = sp.kron(sp.eye(T), sp.csr_matrix(s.R), format="csr") @ P_all
        prog.add_ineq("v_lo", -RP, -np.tile(env.lo, T))
        prog.add_ineq("v_hi", RP, np.tile(env.hi, T))
    return prog


def assemble_social_welfare(s: Scenario) -> cs.ConvexProgram:
    """Welfare maximization as a minimization of negated total utility with
    dynamics eliminated, trading, balance, voltage and box constraints."""
    return _assemble(s, voltage=True)


def assemble_unconstrained_voltage_welfare(s: Scenario) -> cs.ConvexProgram:
    """Same program with the voltage rows dropped."""
    return _assemble(s, voltage=False)


def _prices_from_duals(s: Scenario, duals, voltage: bool) -> LocationalPrices:
    n, T = s.n, s.T
    alpha = duals["balance"] / s.delta
    if voltage:
        xi_lo = duals["v_lo"].reshape(T, n).T / s.delta
        xi_hi = duals["v_hi"].reshape(T, n).T / s.delta
    else:
        xi_lo = np.zeros((n, T))
        xi_hi = np.zeros((n, T))
    return LocationalPrices.from_decomposition(s.R, alpha, xi_lo, xi_hi)


def _active_jacobian(prog: cs.ConvexProgram, z, active_tol):
    """Stacked gradients of equality rows and active inequality rows."""
    vals = cs.constraint_values(prog, z)
    rows = [g.A.toarray() for g in prog.eq]
    where = []
    for g in prog.ineq:
        act = np.flatnonzero(vals[g.name] >= -active_tol)
        rows.append(g.A[act].toarray())
        where.append((g.name, act))
    for g in prog.quad:
        act = np.flatnonzero(vals[g.name] >= -active_tol)
        J = g.G[act].toarray()
        for r, j in enumerate(act):
            Q = g.Q[j]
            J[r, g.index[j]] += (Q + Q.T) @ z[g.index[j]]
        rows.append(J)
        where.append((g.name, act))
    return np.vstack(rows), where


def minimal_norm_duals(prog: cs.ConvexProgram, z, active_tol: float = 1e-7,
                       tol: float = 1e-10) -> tuple[dict[str, np.ndarray], bool]:
    """Smallest-norm multipliers certifying optimality of ``z``.

    Returns the multipliers and a flag telling whether they are non-unique
    (the equality plus active-inequality gradients are linearly dependent).
    """
    K, where = _active_jacobian(prog, z, active_tol)
    k_eq = sum(g.size for g in prog.eq)
    grad = prog.P @ z + prog.c
    U, sv, Vt = np.linalg.svd(K.T, full_matrices=False)
    rank = int(np.sum(sv > 1e-9 * max(1.0, sv.max(initial=0.0))))
    degenerate = rank < K.shape[0]
    # min ||w||^2 s.t. K'w = -grad (projected onto range), w_ineq >= 0
    Ur = U[:, :rank]
    Aeq = Ur.T @ K.T
    beq = -Ur.T @ grad
    nw = K.shape[0]
    qp = cs.ConvexProgram(nw, np.eye(nw), np.zeros(nw))
    qp.add_eq("stat", Aeq, beq)
    if nw > k_eq:
        G = np.hstack([np.zeros((nw - k_eq, k_eq)), -np.eye(nw - k_eq)])
        qp.add_ineq("sign", G, np.zeros(nw - k_eq))
    w = cs.solve(qp, tol=tol).z

    duals = {}
    k = 0
    for g in prog.eq:
        duals[g.name] = w[k:k + g.size]
        k += g.size
    sizes = {g.name: g.size for g in [*prog.ineq, *prog.quad]}
    for name, act in where:
        lam = np.zeros(sizes[name])
        lam[act] = np.maximum(w[k:k + act.size], 0.0)
        duals[name] = lam
        k += act.size
    return duals, degenerate


def clear_market(s: Scenario, tol: float = 1e-8, voltage: bool = True,
                 degeneracy_check: bool = True) -> MarketOutcome:
    """Solve the welfare program and read locational prices off its duals."""
    prog = _assemble(s, voltage)
    sol = cs.solve_or_raise(prog, tol=tol)
    prices = _prices_from_duals(s, sol.duals, voltage)
    if prices.lam.min() < -NEGATIVE_PRICE_TOL:
        raise MarketConsistencyError(
            f"negative locational price {prices.lam.min():.3g} at a welfare optimum")

    inputs, states, inj = [], [], []
    for i, spec in enumerate(s.prosumers, start=1):
        U = sol.primal[f"U{i}"].reshape(s.T, spec.m)
        inputs.append(U)
        states.append(simulate(spec.dynamics, spec.x0, U))
        inj.append(sol.primal[f"p{i}"])
    P = np.array(inj)
    flows = recover_line_flows(s.network, P, s.q, s.v0, tol=max(1e-6, 10 * tol))

    degenerate = False
    min_norm = None
    if degeneracy_check:
        duals, degenerate = minimal_norm_duals(prog, sol.z)
        if degenerate:
            min_norm = _prices_from_duals(s, duals, voltage)
            log.info("multipliers are not unique; minimal-norm prices attached")
    return MarketOutcome(s, sol, prices, inputs, states, P, -sol.objective, flows, voltage,
                         degenerate, min_norm)


def assemble_best_response(spec: ProsumerSpec, prices, delta: float) -> cs.ConvexProgram:
    """Full per-prosumer program over (U, p), no network constraints."""
    T = spec.T
    m = spec.m
    prices = np.asarray(prices, float).reshape(-1)
    N = T * m + T
    Pu, cu, k = condensed_cost(spec, T)
    P = np.zeros((N, N))
    P[:T * m, :T * m] = Pu
    c = np.concatenate([cu, -prices * delta])
    blocks = {"U": slice(0, T * m), "p": slice(T * m, N)}
    prog = cs.ConvexProgram(N, P, c, k, blocks)
    _trading_rows(prog, "trade", spec, blocks["U"], blocks["p"], delta, T)
    _local_rows(prog, 1, spec, blocks["U"], T)
    return prog


@dataclass
class BestResponse:
    inputs: np.ndarray  # (T, m)
    injections: np.ndarray  # (T,)
    payoff: float
    solution: cs.PrimalDualSolution


def best_response(spec: ProsumerSpec, prices, delta: float, tol: float = 1e-8,
                  zero_tol: float = 1e-9) -> BestResponse:
    """Payoff-maximizing inputs and injections of one price-taking prosumer.

    With non-negative prices the income term never rewards withholding
    energy, so the trading constraint is saturated:
    ``p(t) delta = a(t) - h(u(t))``.  This is also the tie-break when
    ``prices(t) == 0``.  Substituting it leaves a convex QP in the inputs.
    """
    prices = np.asarray(prices, float).reshape(-1)
    if prices.size != spec.T:
        raise ValueError(f"price series has {prices.size} entries, horizon is {spec.T}")
    if prices.min() < -zero_tol:
        raise ValueError("a negative price makes the prosumer's problem unbounded")
    prices = np.maximum(prices, 0.0)
    T, m = spec.T, spec.m
    Pu, cu, k = condensed_cost(spec, T)
    ut = spec.utility
    # -sum_t prices(t) (a(t) - u'Hu - h_lin'u)
    P = Pu.copy()
    c = cu.copy()
    for t in range(T):
        sl = slice(t * m, (t + 1) * m)
        P[sl, sl] += 2.0 * prices[t] * ut.H
        c[sl] += prices[t] * ut.h_lin
    const = k - float(prices @ spec.supply)
    prog = cs.ConvexProgram(T * m, 0.5 * (P + P.T), c, const, {"U": slice(0, T * m)})
    _local_rows(prog, 1, spec, prog.blocks["U"], T)
    sol = cs.solve_or_raise(prog, tol=tol)
    U = sol.z.reshape(T, m)
    p = np.array([(spec.supply[t] - consumption(spec, U[t])) / delta for t in range(T)])
    return BestResponse(U, p, payoff(spec, prices, U, p, delta), sol)
