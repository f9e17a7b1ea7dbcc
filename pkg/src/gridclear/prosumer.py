"""Prosumer models: linear dynamics, boxes, quadratic utilities and consumption."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

PSD_FLOOR = -1e-9


def _mat(a, shape=None):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if shape is not None and a.shape != shape:
        raise ValueError(f"expected matrix of shape {shape}, got {a.shape}")
    return a


def _vec(a, size):
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.size == 1 and size > 1:
        a = np.full(size, a.item())
    if a.size != size:
        raise ValueError(f"expected vector of length {size}, got {a.size}")
    return a


def is_psd(M, floor: float = PSD_FLOOR) -> bool:
    M = np.asarray(M, float)
    return bool(np.linalg.eigvalsh(0.5 * (M + M.T)).min() >= floor)


@dataclass(frozen=True)
class LtiDynamics:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _mat(self.A)
        B = _mat(self.B)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B has {B.shape[0]} rows but the state dimension is {A.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class Boxes:
    x_lo: np.ndarray
    x_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray

    def __post_init__(self):
        for name in ("x_lo", "x_hi", "u_lo", "u_hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float).reshape(-1))
        if np.any(self.x_lo > self.x_hi) or np.any(self.u_lo > self.u_hi):
            raise ValueError("box lower bounds exceed upper bounds")


@dataclass(frozen=True)
class QuadraticUtility:
    """Running utility ``-(x-x_ref)'Qf(x-x_ref) - u'Rf u``, terminal utility
    ``-(x-xT_ref)'QT(x-xT_ref)`` and consumption ``h(u) = u'H u + h_lin'u``."""

    Qf: np.ndarray
    Rf: np.ndarray
    QT: np.ndarray
    x_ref: np.ndarray
    xT_ref: np.ndarray
    H: np.ndarray
    h_lin: np.ndarray

    def __post_init__(self):
        for name in ("Qf", "Rf", "QT", "H"):
            object.__setattr__(self, name, _mat(getattr(self, name)))
        for name in ("x_ref", "xT_ref", "h_lin"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float).reshape(-1))

    def concavity_violations(self) -> list[str]:
        """Names of matrices breaking the concave-utility / convex-consumption
        requirement (eigenvalue floor -1e-9)."""
        return [k for k in ("Qf", "Rf", "QT", "H") if not is_psd(getattr(self, k))]


@dataclass(frozen=True)
class ProsumerSpec:
    dynamics: LtiDynamics
    boxes: Boxes
    utility: QuadraticUtility
    supply: np.ndarray  # a_i(t), kWh per interval
    q: float
    x0: np.ndarray

    def __post_init__(self):
        d, m = self.dynamics.d, self.dynamics.m
        object.__setattr__(self, "supply", np.asarray(self.supply, float).reshape(-1))
        object.__setattr__(self, "x0", _vec(self.x0, d))
        object.__setattr__(self, "q", float(self.q))
        b = self.boxes
        b = replace(b, **{k: _vec(getattr(b, k), size)
                          for k, size in (("x_lo", d), ("x_hi", d), ("u_lo", m), ("u_hi", m))})
        u = self.utility
        for name, shape in (("Qf", (d, d)), ("Rf", (m, m)), ("QT", (d, d)), ("H", (m, m))):
            _mat(getattr(u, name), shape)
        u = replace(u, **{k: _vec(getattr(u, k), size)
                          for k, size in (("x_ref", d), ("xT_ref", d), ("h_lin", m))})
        object.__setattr__(self, "boxes", b)
        object.__setattr__(self, "utility", u)
        if np.any(self.x0 < b.x_lo - 1e-12) or np.any(self.x0 > b.x_hi + 1e-12):
            raise ValueError("initial state lies outside the state box")

    @property
    def d(self) -> int:
        return self.dynamics.d

    @property
    def m(self) -> int:
        return self.dynamics.m

    @property
    def T(self) -> int:
        return self.supply.size


def simulate(dyn: LtiDynamics, x0, U) -> np.ndarray:
    """State trajectory of shape (T+1, d) under inputs ``U`` of shape (T, m)."""
    x0 = _vec(x0, dyn.d)
    U = np.asarray(U, float).reshape(-1, dyn.m)
    X = np.empty((U.shape[0] + 1, dyn.d))
    X[0] = x0
    for t, u in enumerate(U):
        X[t + 1] = dyn.A @ X[t] + dyn.B @ u
    return X


def condense(dyn: LtiDynamics, x0, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Affine map from stacked inputs to stacked states.

    Returns ``(free, Gamma)`` with ``free`` of shape (T+1, d) and ``Gamma`` of
    shape ((T+1) d, T m) such that the flattened state trajectory equals
    ``free.ravel() + Gamma @ U.ravel()``.
    """
    d, m = dyn.d, dyn.m
    x0 = _vec(x0, d)
    free = np.empty((T + 1, d))
    free[0] = x0
    powers = [np.eye(d)]
    for t in range(T):
        free[t + 1] = dyn.A @ free[t]
        powers.append(dyn.A @ powers[-1])
    Gamma = np.zeros(((T + 1) * d, T * m))
    for t in range(1, T + 1):
        for j in range(t):
            Gamma[t * d:(t + 1) * d, j * m:(j + 1) * m] = powers[t - j - 1] @ dyn.B
    return free, Gamma


def running_utility(u: QuadraticUtility, x, uu) -> float:
    dx = np.asarray(x, float) - u.x_ref
    uu = np.asarray(uu, float)
    return float(-dx @ u.Qf @ dx - uu @ u.Rf @ uu)


def terminal_utility(u: QuadraticUtility, x) -> float:
    dx = np.asarray(x, float) - u.xT_ref
    return float(-dx @ u.QT @ dx)


def consumption(spec: ProsumerSpec, u) -> float:
    """Energy drawn by applying input ``u`` for one interval (kWh)."""
    u = np.asarray(u, float).reshape(-1)
    ut = spec.utility
    return float(u @ ut.H @ u + ut.h_lin @ u)


def utility_total(spec: ProsumerSpec, U) -> float:
    """Sum of running utilities over the horizon plus the terminal utility."""
    U = np.asarray(U, float).reshape(-1, spec.m)
    X = simulate(spec.dynamics, spec.x0, U)
    ut = spec.utility
    total = sum(running_utility(ut, X[t], U[t]) for t in range(U.shape[0]))
    return total + terminal_utility(ut, X[-1])


def payoff(spec: ProsumerSpec, prices, U, p, delta: float) -> float:
    """Utility plus trading income ``sum_t prices(t) p(t) delta``."""
    prices = np.asarray(prices, float).reshape(-1)
    p = np.asarray(p, float).reshape(-1)
    if prices.size != p.size:
        raise ValueError("price and injection series differ in length")
    return utility_total(spec, U) + float(prices @ p) * delta


def condensed_cost(spec: ProsumerSpec, T: int | None = None):
    """Negated utility as a quadratic in the stacked inputs.

    Returns ``(P, c, const)`` with
    ``-utility_total(spec, U) == 0.5 U'PU + c'U + const`` for ``U`` flattened
    time-major.  The dynamics are eliminated by substitution.
    """
    T = spec.T if T is None else T
    d, m = spec.d, spec.m
    ut = spec.utility
    free, Gamma = condense(spec.dynamics, spec.x0, T)
    P = np.zeros((T * m, T * m))
    c = np.zeros(T * m)
    const = 0.0
    for t in range(T + 1):
        Q, ref = (ut.Qf, ut.x_ref) if t < T else (ut.QT, ut.xT_ref)
        G = Gamma[t * d:(t + 1) * d]
        e = free[t] - ref
        P += 2.0 * G.T @ Q @ G
        c += 2.0 * G.T @ Q @ e
        const += e @ Q @ e
    for t in range(T):
        sl = slice(t * m, (t + 1) * m)
        P[sl, sl] += 2.0 * ut.Rf
    return 0.5 * (P + P.T), c, float(const)


def state_box_rows(spec: ProsumerSpec, T: int | None = None):
    """Linear constraints ``G U <= h`` keeping ``x(1..T)`` inside the state box."""
    T = spec.T if T is None else T
    d = spec.d
    free, Gamma = condense(spec.dynamics, spec.x0, T)
    G = Gamma[d:]
    f = free[1:].ravel()
    b = spec.boxes
    hi = np.tile(b.x_hi, T) - f
    lo = f - np.tile(b.x_lo, T)
    keep_hi = np.isfinite(hi)
    keep_lo = np.isfinite(lo)
    return (G[keep_lo] * -1.0, lo[keep_lo]), (G[keep_hi], hi[keep_hi])
