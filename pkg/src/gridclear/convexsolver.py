"""Primal-dual interior-point solver for convex quadratically constrained QPs.

Canonical form::

    minimize    0.5 z'Pz + c'z + const
    subject to  A_k z  = b_k                               (equality groups)
                G_k z <= h_k                               (linear groups)
                z_I'Q_j z_I + g_j'z <= h_j  for each row j  (quadratic groups)

Sign convention (used everywhere in the package): the Lagrangian is
``f + sum y'(Az - b) + sum lam'(g(z))`` with every inequality written as
``g(z) <= 0`` and ``lam >= 0``.  So for ``min x^2 s.t. x >= 1`` the multiplier
of ``1 - x <= 0`` is 2, and for ``min x^2 + y^2 s.t. x + y = 2`` the equality
multiplier is -2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The solver did not reach an optimal point."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


@dataclass
class LinearGroup:
    name: str
    A: sp.csr_matrix
    b: np.ndarray

    @property
    def size(self) -> int:
        return self.b.size


@dataclass
class QuadraticGroup:
    """Rows ``z[index_j]' Q_j z[index_j] + G_j z <= h_j``."""

    name: str
    G: sp.csr_matrix
    h: np.ndarray
    index: list[np.ndarray]
    Q: list[np.ndarray]

    @property
    def size(self) -> int:
        return self.h.size


@dataclass
class ConvexProgram:
    n: int
    P: np.ndarray
    c: np.ndarray
    const: float = 0.0
    blocks: dict[str, slice] = field(default_factory=dict)
    eq: list[LinearGroup] = field(default_factory=list)
    ineq: list[LinearGroup] = field(default_factory=list)
    quad: list[QuadraticGroup] = field(default_factory=list)

    def add_eq(self, name, A, b):
        self.eq.append(LinearGroup(name, sp.csr_matrix(A, shape=(len(b), self.n)), np.asarray(b, float)))

    def add_ineq(self, name, G, h):
        self.ineq.append(LinearGroup(name, sp.csr_matrix(G, shape=(len(h), self.n)), np.asarray(h, float)))

    def add_quad(self, name, G, h, index, Q):
        self.quad.append(QuadraticGroup(
            name, sp.csr_matrix(G, shape=(len(h), self.n)), np.asarray(h, float),
            [np.asarray(i, dtype=int) for i in index], [np.asarray(q, float) for q in Q]))

    def objective(self, z) -> float:
        z = np.asarray(z, float)
        return float(0.5 * z @ self.P @ z + self.c @ z + self.const)

    def split(self, z) -> dict[str, np.ndarray]:
        return {k: np.asarray(z)[s] for k, s in self.blocks.items()}

    def validate(self):
        if self.P.shape != (self.n, self.n) or self.c.shape != (self.n,):
            raise ValueError("objective dimensions do not match the variable count")
        if np.linalg.eigvalsh(0.5 * (self.P + self.P.T)).min() < -1e-9 * max(1.0, np.abs(self.P).max()):
            raise ValueError("objective Hessian is not positive semidefinite")
        for g in self.quad:
            if len(g.index) != g.h.size or len(g.Q) != g.h.size:
                raise ValueError(f"quadratic group {g.name!r} is malformed")
            for Q in g.Q:
                if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-9:
                    raise ValueError(f"quadratic group {g.name!r} has a non-convex row")


@dataclass(frozen=True)
class KKTResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)

    def within(self, tol: float) -> bool:
        return self.max() <= tol


@dataclass
class PrimalDualSolution:
    status: str
    z: np.ndarray
    primal: dict[str, np.ndarray]
    duals: dict[str, np.ndarray]
    residuals: KKTResiduals
    objective: float
    iterations: int

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def constraint_values(prog: ConvexProgram, z) -> dict[str, np.ndarray]:
    """Values of ``g(z)`` (feasible when <= 0) per inequality group, and of
    ``Az - b`` per equality group."""
    z = np.asarray(z, float)
    out = {g.name: g.A @ z - g.b for g in prog.eq}
    out.update({g.name: g.A @ z - g.b for g in prog.ineq})
    for g in prog.quad:
        quad = np.array([z[i] @ Q @ z[i] for i, Q in zip(g.index, g.Q)])
        out[g.name] = quad + g.G @ z - g.h
    return out


def kkt_residuals(prog: ConvexProgram, z, duals: dict[str, np.ndarray]) -> KKTResiduals:
    """Max-norm KKT residuals of a candidate primal/dual pair.

    Evaluated group by group straight from the program data, without any of
    the stacked matrices the solver builds.
    """
    z = np.asarray(z, float)
    grad = prog.P @ z + prog.c
    primal = 0.0
    dual = 0.0
    comp = 0.0
    vals = constraint_values(prog, z)
    for g in prog.eq:
        y = duals[g.name]
        grad = grad + g.A.T @ y
        if g.b.size:
            primal = max(primal, np.abs(vals[g.name]).max())
    for g in prog.ineq:
        lam = duals[g.name]
        grad = grad + g.A.T @ lam
    for g in prog.quad:
        lam = duals[g.name]
        grad = grad + g.G.T @ lam
        for j, (i, Q) in enumerate(zip(g.index, g.Q)):
            grad[i] += lam[j] * (Q + Q.T) @ z[i]
    for g in [*prog.ineq, *prog.quad]:
        if g.size == 0:
            continue
        lam = duals[g.name]
        v = vals[g.name]
        primal = max(primal, max(v.max(), 0.0))
        dual = max(dual, max(-lam.min(), 0.0))
        comp = max(comp, np.abs(lam * v).max())
    return KKTResiduals(float(np.abs(grad).max()) if grad.size else 0.0, float(primal), float(dual), float(comp))


class _Stacked:
    """Stacked constraint data used inside the iteration."""

    def __init__(self, prog: ConvexProgram):
        self.prog = prog
        n = prog.n
        self.A = sp.vstack([g.A for g in prog.eq], format="csr") if prog.eq else sp.csr_matrix((0, n))
        self.b = np.concatenate([g.b for g in prog.eq]) if prog.eq else np.zeros(0)
        self.G = sp.vstack([g.A for g in prog.ineq], format="csr") if prog.ineq else sp.csr_matrix((0, n))
        self.h = np.concatenate([g.b for g in prog.ineq]) if prog.ineq else np.zeros(0)
        self.m_lin = self.h.size
        self.Gq = sp.vstack([g.G for g in prog.quad], format="csr") if prog.quad else sp.csr_matrix((0, n))
        self.hq = np.concatenate([g.h for g in prog.quad]) if prog.quad else np.zeros(0)
        self.qindex = [i for g in prog.quad for i in g.index]
        self.qmat = [0.5 * (Q + Q.T) for g in prog.quad for Q in g.Q]
        self.m = self.m_lin + self.hq.size
        if self.qindex:
            self.q_rows = np.concatenate([np.full(i.size, j) for j, i in enumerate(self.qindex)])
            self.q_cols = np.concatenate(self.qindex)
        else:
            self.q_rows = self.q_cols = np.zeros(0, dtype=int)

    def g(self, z):
        quad = np.array([z[i] @ Q @ z[i] for i, Q in zip(self.qindex, self.qmat)])
        return np.concatenate([self.G @ z - self.h, quad + self.Gq @ z - self.hq])

    def jac(self, z):
        if not self.qindex:
            return self.G
        vals = np.concatenate([2.0 * Q @ z[i] for i, Q in zip(self.qindex, self.qmat)])
        Jq = self.Gq + sp.csr_matrix((vals, (self.q_rows, self.q_cols)), shape=self.Gq.shape)
        return sp.vstack([self.G, Jq], format="csr")

    def hess_constraints(self, lam_q, out):
        for lj, i, Q in zip(lam_q, self.qindex, self.qmat):
            out[np.ix_(i, i)] += 2.0 * lj * Q

    def unstack(self, y, lam):
        duals = {}
        k = 0
        for g in self.prog.eq:
            duals[g.name] = y[k:k + g.b.size]
            k += g.b.size
        k = 0
        for g in [*self.prog.ineq, *self.prog.quad]:
            duals[g.name] = lam[k:k + g.size]
            k += g.size
        return duals


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def solve(prog: ConvexProgram, tol: float = 1e-8, max_iter: int = 100_000,
          stall_iter: int = 60) -> PrimalDualSolution:
    """Solve ``prog`` with a Mehrotra predictor-corrector interior-point method.

    The returned solution has status ``"optimal"`` only when every KKT residual
    (as computed by :func:`kkt_residuals`) is at most ``tol``.  Otherwise the
    status is ``"infeasible"``, ``"unbounded"``, ``"stalled"`` or
    ``"max_iter"`` and the best iterate found is returned.
    """
    prog.validate()
    S = _Stacked(prog)
    n, m, k = prog.n, S.m, S.b.size
    P = 0.5 * (prog.P + prog.P.T)

    z = np.zeros(n)
    y = np.zeros(k)
    g = S.g(z)
    s = np.maximum(-g, 1.0)
    lam = np.ones(m)

    best = None
    best_err = np.inf
    since_best = 0
    status = "max_iter"
    it = 0
    for it in range(max_iter + 1):
        duals = S.unstack(y, lam)
        res = kkt_residuals(prog, z, duals)
        err = res.max()
        log.debug("iter %d: stat=%.2e primal=%.2e comp=%.2e mu=%.2e", it, res.stationarity,
                  res.primal, res.complementarity, float(s @ lam / m) if m else 0.0)
        if err < best_err * (1 - 1e-3) or best is None:
            best, best_err, since_best = (z.copy(), y.copy(), lam.copy(), res), err, 0
        else:
            since_best += 1
        if res.within(tol):
            best = (z.copy(), y.copy(), lam.copy(), res)
            status = "optimal"
            break
        if since_best >= stall_iter:
            status = _diagnose(z, lam, res, tol)
            break
        if it == max_iter:
            break

        g = S.g(z)
        J = S.jac(z)
        r_d = P @ z + prog.c + S.A.T @ y + J.T @ lam
        r_e = S.A @ z - S.b
        r_i = g + s
        mu = float(s @ lam) / m if m else 0.0

        H = P.copy()
        S.hess_constraints(lam[S.m_lin:], H)
        w = lam / s
        H += (J.T @ sp.diags(w) @ J).toarray() if m else 0.0
        K = np.zeros((n + k, n + k))
        K[:n, :n] = H
        if k:
            Ad = S.A.toarray()
            K[:n, n:] = Ad.T
            K[n:, :n] = Ad
        K[:n, :n] += 1e-13 * np.eye(n)
        K[n:, n:] -= 1e-13 * np.eye(k)
        try:
            lu = sla.lu_factor(K, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            status = "stalled"
            break

        def newton(r_c):
            rhs = np.concatenate([-r_d - J.T @ ((r_c + lam * r_i) / s), -r_e])
            sol = sla.lu_solve(lu, rhs, check_finite=False)
            # one round of iterative refinement
            sol += sla.lu_solve(lu, rhs - K @ sol, check_finite=False)
            dz, dy = sol[:n], sol[n:]
            ds = -r_i - J @ dz
            dlam = (r_c - lam * ds) / s
            return dz, dy, ds, dlam

        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            dz, dy, ds, dlam = newton(-s * lam)
            a_aff = min(_max_step(s, ds), _max_step(lam, dlam))
            mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dlam)) / m if m else 0.0
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            dz, dy, ds, dlam = newton(-s * lam + sigma * mu - ds * dlam)
            a = min(1.0, 0.99 * _max_step(s, ds), 0.99 * _max_step(lam, dlam)) if m else 1.0
            step = (z + a * dz, y + a * dy, s + a * ds, lam + a * dlam)
        if not all(np.all(np.isfinite(v)) for v in step) or (m and s.min() <= 0):
            # numerical blow-up: classify from the last finite iterate
            status = _diagnose(z, lam, res, tol)
            break
        z, y, s, lam = step

    z, y, lam, res = best
    duals = S.unstack(y, lam)
    return PrimalDualSolution(status, z, prog.split(z), duals, res, prog.objective(z), it)


def _diagnose(z, lam, res, tol):
    if np.abs(z).max(initial=0.0) > 1e10:
        return "unbounded"
    if res.primal > tol and np.abs(lam).max(initial=0.0) > 1e6:
        return "infeasible"
    return "stalled"


def solve_or_raise(prog: ConvexProgram, tol: float = 1e-8, **kw) -> PrimalDualSolution:
    sol = solve(prog, tol=tol, **kw)
    if not sol.optimal:
        raise SolverError(
            f"solver finished with status {sol.status!r} (residuals {sol.residuals})", sol)
    return sol
