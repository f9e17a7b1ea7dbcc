"""Independent certification of market outcomes.

Everything here re-derives its verdict from the scenario data and the
candidate triple (prices, inputs, injections): best responses are re-solved
per prosumer, and network conditions are evaluated directly.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .market import (LocationalPrices, MarketOutcome, Scenario, best_response, clear_market)
from .prosumer import is_psd, payoff, simulate

NOT_CHECKABLE = "not checkable"


@dataclass
class Condition:
    passed: bool | None
    residual: float
    detail: str = ""


@dataclass
class EquilibriumReport:
    conditions: dict[str, Condition]
    tol: float

    @property
    def verdict(self) -> str:
        if any(c.passed is None for c in self.conditions.values()):
            return "incomplete" if all(c.passed is not False for c in self.conditions.values()) else "fail"
        return "pass" if all(c.passed for c in self.conditions.values()) else "fail"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "tol": self.tol,
                "conditions": {k: asdict(v) for k, v in self.conditions.items()}}


def _local_violation(spec, U, delta, p) -> float:
    """Largest violation of the prosumer's own constraints."""
    X = simulate(spec.dynamics, spec.x0, U)
    b = spec.boxes
    v = [np.max(b.u_lo - U), np.max(U - b.u_hi), np.max(b.x_lo - X[1:]), np.max(X[1:] - b.x_hi)]
    H, h = spec.utility.H, spec.utility.h_lin
    cons = np.einsum("ti,ij,tj->t", U, H, U) + U @ h
    v.append(np.max(p * delta + cons - spec.supply))
    return max(0.0, float(max(v)))


def _voltage_slacks(s: Scenario, P):
    vt = s.R @ P
    env = s.envelope
    return env.lo[:, None] - vt, vt - env.hi[:, None]  # both <= 0 when feasible


def _best_response_gaps(s: Scenario, lam, U, P, tol):
    gaps, payoffs = [], []
    for i, spec in enumerate(s.prosumers):
        U_i = np.asarray(U[i], float).reshape(s.T, spec.m)
        mine = payoff(spec, lam[i], U_i, P[i], s.delta)
        try:
            br = best_response(spec, lam[i], s.delta, tol=min(tol, 1e-8) * 1e-1)
            gap = br.payoff - mine
        except ValueError:
            gap = np.inf  # negative price: payoff unbounded
        gaps.append(max(gap, _local_violation(spec, U_i, s.delta, P[i])))
        payoffs.append(mine)
    return np.array(gaps), np.array(payoffs)


def verify_competitive_equilibrium(s: Scenario, prices: LocationalPrices, U, P,
                                   tol: float = 1e-5) -> EquilibriumReport:
    """Check the five equilibrium conditions for a (prices, inputs, injections) triple.

    Condition (i) compares optimal payoff values, not argmins, since a
    prosumer's problem may have several optima.
    """
    P = np.asarray(P, float)
    lam = np.asarray(prices.lam, float)
    cond = {}

    gaps, _ = _best_response_gaps(s, lam, U, P, tol)
    worst = int(np.argmax(gaps))
    cond["best_response"] = Condition(bool(gaps.max() <= tol), float(gaps.max()),
                                      f"largest payoff gap at prosumer {worst + 1}")

    bal = float(np.abs(P.sum(axis=0)).max())
    cond["balance"] = Condition(bal <= tol, bal, "max_t |sum_i p_i(t)|")

    lo_gap, hi_gap = _voltage_slacks(s, P)
    viol = float(max(lo_gap.max(), hi_gap.max(), 0.0))
    cond["voltage"] = Condition(viol <= tol, viol, "largest voltage-box violation")

    if prices.has_decomposition:
        recon = LocationalPrices.compose(s.R, prices.alpha, prices.xi_lo, prices.xi_hi)
        res = float(np.abs(lam - recon).max())
        neg = float(max(-np.min(prices.xi_lo), -np.min(prices.xi_hi), 0.0))
        cond["price_decomposition"] = Condition(max(res, neg) <= tol, max(res, neg),
                                               "price decomposition residual / negative voltage price")
        comp = float(max(np.abs(prices.xi_lo * lo_gap).max(), np.abs(prices.xi_hi * hi_gap).max()))
        cond["complementarity"] = Condition(comp <= tol, comp, "max |xi * voltage slack|")
    else:
        cond["price_decomposition"] = Condition(None, float("nan"), NOT_CHECKABLE)
        cond["complementarity"] = Condition(None, float("nan"), NOT_CHECKABLE)
    return EquilibriumReport(cond, tol)


def verify_nash(s: Scenario, alpha, xi_lo, xi_hi, U, P, tol: float = 1e-5) -> EquilibriumReport:
    """Nash check for the game between price-taking prosumers and a price player.

    Prosumers face ``lambda = alpha + R'(xi_lo - xi_hi)``.  The price player's
    objective is linear in ``(alpha, xi_lo, xi_hi)`` with only ``xi >= 0``, so
    its first-order conditions are: zero coefficient on the free ``alpha``
    (balance), non-positive coefficients on ``xi`` (voltage feasibility),
    ``xi >= 0``, and complementary slackness.
    """
    P = np.asarray(P, float)
    xi_lo = np.asarray(xi_lo, float)
    xi_hi = np.asarray(xi_hi, float)
    lam = LocationalPrices.compose(s.R, alpha, xi_lo, xi_hi)
    cond = {}
    gaps, _ = _best_response_gaps(s, lam, U, P, tol)
    cond["prosumers"] = Condition(bool(gaps.max() <= tol), float(gaps.max()),
                                  "best-response payoff gap under composed prices")
    bal = float(np.abs(P.sum(axis=0)).max())
    cond["alpha_stationarity"] = Condition(bal <= tol, bal, "coefficient of alpha(t): sum_i p_i(t)")
    lo_gap, hi_gap = _voltage_slacks(s, P)
    cond["xi_lo_coefficient"] = Condition(float(lo_gap.max()) <= tol, float(max(lo_gap.max(), 0.0)),
                                          "v_lo - R p must be <= 0")
    cond["xi_hi_coefficient"] = Condition(float(hi_gap.max()) <= tol, float(max(hi_gap.max(), 0.0)),
                                          "R p - v_hi must be <= 0")
    neg = float(max(-xi_lo.min(), -xi_hi.min(), 0.0))
    cond["xi_nonnegative"] = Condition(neg <= tol, neg, "price player's feasible set")
    comp = float(max(np.abs(xi_lo * lo_gap).max(), np.abs(xi_hi * hi_gap).max()))
    cond["complementarity"] = Condition(comp <= tol, comp, "xi times its coefficient")
    return EquilibriumReport(cond, tol)


def verify_outcome(outcome: MarketOutcome, tol: float = 1e-5) -> EquilibriumReport:
    return verify_competitive_equilibrium(outcome.scenario, outcome.prices, outcome.inputs,
                                          outcome.injections, tol)


@dataclass
class StrictReport:
    strict: bool
    min_margin: float  # smallest distance of R p to a voltage bound, relaxed problem
    relaxed: MarketOutcome
    spread: float | None = None
    cleared: MarketOutcome | None = None


def price_spread(lam) -> float:
    lam = np.asarray(lam)
    return float((lam.max(axis=0) - lam.min(axis=0)).max())


def check_strict_implementability(s: Scenario, tol: float = 1e-6) -> StrictReport:
    """Solve welfare without voltage rows and test strict voltage interiority.

    When the relaxed optimum is strictly interior the full market is cleared
    and the largest cross-node price difference is reported; it should not
    exceed ``10 * tol``.
    """
    relaxed = clear_market(s, voltage=False, degeneracy_check=False)
    lo_gap, hi_gap = _voltage_slacks(s, relaxed.injections)
    margin = float(-max(lo_gap.max(), hi_gap.max()))
    strict = margin > tol
    if not strict:
        return StrictReport(False, margin, relaxed)
    cleared = clear_market(s, degeneracy_check=False)
    return StrictReport(True, margin, relaxed, price_spread(cleared.prices.lam), cleared)


@dataclass
class DecayConditionsReport:
    items: dict[str, bool]
    witnesses: dict[str, object]

    @property
    def passed(self) -> bool:
        return all(self.items.values())

    def to_dict(self) -> dict:
        return {"passed": self.passed, "items": dict(self.items), "witnesses": self.witnesses}


def equal_share_voltages(s: Scenario) -> np.ndarray:
    """``(1/delta) sum_k R_ik (a_k - D/n)`` for constant supplies."""
    a = s.supply()[:, 0]
    D = a.sum()
    return s.R @ (a - D / s.n) / s.delta


def check_decay_conditions(s: Scenario) -> DecayConditionsReport:
    """Check the conditions under which prices fall to zero after finitely many steps.

    Items: running and terminal utilities negative definite (strict
    eigenvalue test on Qf, Rf, QT); consumption convex; utilities centred at
    the origin (zero offsets); constant supplies; positive total supply D;
    and the equal-share injections ``(a_k - D/n)/delta`` keeping every
    ``R``-weighted voltage strictly inside its limits.  Feasibility of the
    initial state for steering to the origin is not checked.
    """
    items, wit = {}, {}
    ceilings = []
    for spec in s.prosumers:
        ut = spec.utility
        ceilings.append(max(-np.linalg.eigvalsh(ut.Qf).min(), -np.linalg.eigvalsh(ut.Rf).min(),
                            -np.linalg.eigvalsh(ut.QT).min()))
    wit["nd_eigenvalue_ceiling"] = float(max(ceilings))
    items["negative_definite_utility"] = wit["nd_eigenvalue_ceiling"] < 0
    items["convex_consumption"] = all(is_psd(spec.utility.H) for spec in s.prosumers)
    wit["max_offset"] = float(max(max(np.abs(p.utility.x_ref).max(), np.abs(p.utility.xT_ref).max())
                                  for p in s.prosumers))
    items["through_origin"] = wit["max_offset"] == 0.0
    a = s.supply()
    wit["supply_variation"] = float((a.max(axis=1) - a.min(axis=1)).max())
    items["constant_supply"] = wit["supply_variation"] == 0.0
    D = float(a[:, 0].sum())
    wit["D"] = D
    items["positive_total_supply"] = D > 0
    sv = equal_share_voltages(s)
    env = s.envelope
    slack = float(np.minimum(env.hi - sv, sv - env.lo).min())
    wit["equal_share_slack"] = slack
    items["equal_share_interior"] = bool(items["constant_supply"] and slack > 0)
    return DecayConditionsReport({k: bool(v) for k, v in items.items()}, wit)


check_assumption2 = check_decay_conditions
Assumption2Report = DecayConditionsReport


def detect_price_decay(lam, tol: float = 1e-5) -> int | None:
    """Smallest step after which every price stays within ``tol`` of zero."""
    lam = np.atleast_2d(np.asarray(lam, float))
    T = lam.shape[1]
    big = np.flatnonzero(np.abs(lam).max(axis=0) > tol)
    if big.size == 0:
        return 0
    t_bar = int(big[-1]) + 1
    return t_bar if t_bar < T else None


def equal_share_injections(s: Scenario, U) -> np.ndarray:
    """Injections where each prosumer keeps its surplus minus an equal share
    of the network-wide surplus (balanced by construction)."""
    n, T = s.n, s.T
    surplus = np.zeros((n, T))
    for i, spec in enumerate(s.prosumers):
        Ui = np.asarray(U[i], float).reshape(T, spec.m)
        H, h = spec.utility.H, spec.utility.h_lin
        surplus[i] = spec.supply - (np.einsum("ti,ij,tj->t", Ui, H, Ui) + Ui @ h)
    return (surplus - surplus.sum(axis=0) / n) / s.delta


@dataclass
class DecayReport:
    t_bar: int | None
    balance_after: float | None = None
    margin_after: float | None = None  # smallest voltage margin of equal-share injections


def decay_report(outcome: MarketOutcome, tol: float = 1e-5) -> DecayReport:
    s = outcome.scenario
    t_bar = detect_price_decay(outcome.prices.lam, tol)
    if t_bar is None:
        return DecayReport(None)
    Pe = equal_share_injections(s, outcome.inputs)[:, t_bar:]
    lo_gap, hi_gap = _voltage_slacks(s, Pe)
    return DecayReport(t_bar, float(np.abs(Pe.sum(axis=0)).max()),
                       float(-max(lo_gap.max(), hi_gap.max())))


# --- brute-force oracle ---------------------------------------------------

class OracleTooLarge(ValueError):
    pass


@dataclass
class OracleResult:
    welfare: float
    inputs: list[np.ndarray]
    shadow_price: float | None
    points: int


def _prosumer_table(spec, T, axes):
    """Welfare and surplus of every plan on one prosumer's input grid.

    ``axes`` holds one coordinate array per input entry, time-major.  Plans
    that leave the state box are dropped; the rest are sorted best first.
    Returns ``(plans (K, T, m), welfare (K,), surplus (K, T))``.
    """
    m = spec.m
    grids = np.meshgrid(*axes, indexing="ij")
    U = np.stack([g.ravel() for g in grids], axis=1).reshape(-1, T, m)
    K = U.shape[0]
    ut, b = spec.utility, spec.boxes
    x = np.repeat(spec.x0[None, :], K, axis=0)
    welfare = np.zeros(K)
    surplus = np.zeros((K, T))
    ok = np.ones(K, dtype=bool)
    for t in range(T):
        u = U[:, t]
        dx = x - ut.x_ref
        welfare -= np.einsum("kd,de,ke->k", dx, ut.Qf, dx) + np.einsum("km,mn,kn->k", u, ut.Rf, u)
        surplus[:, t] = spec.supply[t] - np.einsum("km,mn,kn->k", u, ut.H, u) - u @ ut.h_lin
        x = x @ spec.dynamics.A.T + u @ spec.dynamics.B.T
        ok &= np.all((x >= b.x_lo - 1e-12) & (x <= b.x_hi + 1e-12), axis=1)
    dT = x - ut.xT_ref
    welfare -= np.einsum("kd,de,ke->k", dT, ut.QT, dT)
    order = np.flatnonzero(ok)[np.argsort(-welfare[ok], kind="stable")]
    return U[order], welfare[order], surplus[order]


def _grid_welfare(s: Scenario, tables, shift, chunk=1 << 20):
    """Best welfare over all combinations of per-prosumer plans, subject to
    ``sum_i p_i(t) = shift(t)``.  Returns ``(welfare, per-prosumer indices)``.

    Tables must be sorted by welfare, best first.  The last prosumer's table
    is broadcast against blocks of the other prosumers' combinations; a block
    whose welfare bound cannot beat the incumbent is skipped, which keeps
    the search exact.
    """
    n, T = s.n, s.T
    env = s.envelope
    lo, hi = env.lo - 1e-9, env.hi + 1e-9
    W_last, S_last = tables[-1][1], tables[-1][2] / s.delta
    outer = [tb[1].size for tb in tables[:-1]]
    total = int(np.prod(outer)) if outer else 1
    block = max(1, chunk // (W_last.size * T))
    best_w, best = -np.inf, None
    for start in range(0, total, block):
        idx = np.unravel_index(np.arange(start, min(start + block, total)), outer) if outer else ()
        w_out = sum((tb[1][k] for tb, k in zip(tables, idx)), np.zeros(1 if not outer else idx[0].size))
        if w_out.max() + W_last[0] <= best_w:
            continue
        # saturated injections, shape (n, block, K, T)
        sp = [np.broadcast_to(tb[2][k][:, None, :] / s.delta, (k.size, W_last.size, T))
              for tb, k in zip(tables, idx)]
        sp.append(np.broadcast_to(S_last[None], (w_out.size, W_last.size, T)))
        excess = sum(sp) - shift  # slack left after meeting the balance target
        ok = np.all(excess >= -1e-12, axis=2)
        w = np.where(ok, w_out[:, None] + W_last[None, :], -np.inf)
        ok &= w > best_w
        if not np.any(ok):
            continue
        p = [x - excess / n for x in sp]  # projection onto the balance plane
        for i in range(n):
            vt = sum(s.R[i, k] * p[k] for k in range(n) if s.R[i, k] != 0.0)
            if np.isscalar(vt):
                vt = np.zeros_like(excess)
            ok &= np.all((vt >= lo[i]) & (vt <= hi[i]), axis=2)
        if np.any(ok):
            w = np.where(ok, w, -np.inf)
            j = np.unravel_index(int(np.argmax(w)), w.shape)
            if w[j] > best_w:
                best_w = float(w[j])
                best = [int(k[j[0]]) for k in idx] + [int(j[1])]
    return best_w, best


def _search(s: Scenario, axes, shift):
    tables = [_prosumer_table(spec, s.T, ax) for spec, ax in zip(s.prosumers, axes)]
    w, best = _grid_welfare(s, tables, shift)
    if best is None:
        return -np.inf, None
    return w, [tb[0][k] for tb, k in zip(tables, best)]


def _zoom_axes(s: Scenario, plans, cells, pts):
    axes = []
    for spec, U, cell in zip(s.prosumers, plans, cells):
        ax = []
        for t in range(s.T):
            for c in range(spec.m):
                g = np.linspace(U[t, c] - 2 * cell[c], U[t, c] + 2 * cell[c], pts)
                ax.append(np.unique(np.clip(g, spec.boxes.u_lo[c], spec.boxes.u_hi[c])))
        axes.append(ax)
    return axes


def _optimize(s: Scenario, resolution, shift, refine, zoom_pts=21):
    pts = int(round(1.0 / resolution)) + 1
    axes = [[np.linspace(sp.boxes.u_lo[c], sp.boxes.u_hi[c], pts) for c in range(sp.m)] * s.T
            for sp in s.prosumers]
    w, plans = _search(s, axes, shift)
    if plans is None:
        return w, None
    cells = [(sp.boxes.u_hi - sp.boxes.u_lo) / (pts - 1) for sp in s.prosumers]
    for _ in range(refine):
        w_z, plans_z = _search(s, _zoom_axes(s, plans, cells, zoom_pts), shift)
        if plans_z is not None and w_z >= w:
            w, plans = w_z, plans_z
        cells = [4 * c / (zoom_pts - 1) for c in cells]
    return w, plans


def brute_force_welfare(s: Scenario, resolution: float = 1e-2, shadow_step: float | None = 0.1,
                        shadow_t: int = 0, max_dim: int = 6, refine: int = 2) -> OracleResult:
    """Exhaustive grid search for the welfare optimum of a small scenario.

    Each input coordinate is gridded with spacing ``resolution`` times its box
    width.  For every grid point the injections start from the saturated
    surpluses and are projected onto the balance plane; the point counts as
    feasible when that projection respects the trading limits and the voltage
    box.  ``refine`` further exhaustive passes search a 21-point grid spanning
    two cells either side of the incumbent, which removes most of the
    first-order error when the optimum sits on the balance boundary.

    The energy-price estimate is a central difference of the optimal welfare
    in the balance right-hand side at step ``shadow_t``.
    """
    dim = sum(p.m for p in s.prosumers) * s.T
    if dim > max_dim:
        raise OracleTooLarge(f"decision dimension {dim} exceeds the oracle limit {max_dim}")
    zero = np.zeros(s.T)
    w, plans = _optimize(s, resolution, zero, refine)
    if plans is None:
        raise ValueError("no feasible grid point")
    shadow = None
    if shadow_step:
        up = zero.copy()
        up[shadow_t] = shadow_step
        w_up, _ = _optimize(s, resolution, up, refine)
        w_dn, _ = _optimize(s, resolution, -up, refine)
        # requiring net export shift(t) costs alpha(t) * delta per kW
        shadow = -(w_up - w_dn) / (2 * shadow_step * s.delta)
    pts = int(round(1.0 / resolution)) + 1
    return OracleResult(w, plans, shadow, pts ** dim)
