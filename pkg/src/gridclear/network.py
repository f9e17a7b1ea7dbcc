"""Radial distribution networks under the LinDistFlow model.

Units used throughout the package: resistances and reactances in kOhm,
powers in kW / kvar, squared voltage magnitudes in (kV)^2.  These combine
without extra factors because kOhm * kW = 1e6 V^2 = 1 (kV)^2.  For example a
single 0.5 kOhm line carrying 1 kW towards its child node lowers the child's
squared voltage by 2 * 0.5 * 1 = 1 (kV)^2.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class TopologyError(ValueError):
    """The line list does not describe a tree rooted at node 0."""


class BalanceError(ValueError):
    """Nodal injections do not sum to zero."""


@dataclass(frozen=True)
class Line:
    i: int
    j: int
    r: float
    x: float = 0.0


@dataclass(frozen=True)
class RadialNetwork:
    """Tree on nodes ``0..n`` with node 0 the feeder (reference) node."""

    n: int
    lines: tuple[Line, ...]

    def __post_init__(self):
        lines = tuple(ln if isinstance(ln, Line) else Line(*ln) for ln in self.lines)
        object.__setattr__(self, "lines", lines)
        _check_tree(self.n, lines)

    @cached_property
    def _tree(self):
        adj: dict[int, list[tuple[int, int]]] = {k: [] for k in range(self.n + 1)}
        for e, ln in enumerate(self.lines):
            adj[ln.i].append((ln.j, e))
            adj[ln.j].append((ln.i, e))
        parent = np.full(self.n + 1, -1)
        parent_line = np.full(self.n + 1, -1)
        depth = np.zeros(self.n + 1, dtype=int)
        order = [0]
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v, e in sorted(adj[u]):
                if v not in seen:
                    seen.add(v)
                    parent[v], parent_line[v], depth[v] = u, e, depth[u] + 1
                    order.append(v)
                    queue.append(v)
        return parent, parent_line, depth, tuple(order)

    @property
    def parent(self) -> np.ndarray:
        return self._tree[0]

    @property
    def depth(self) -> np.ndarray:
        return self._tree[2]

    @property
    def bfs_order(self) -> tuple[int, ...]:
        return self._tree[3]

    @cached_property
    def oriented_lines(self) -> tuple[tuple[int, int, float, float], ...]:
        """Lines as ``(parent, child, r, x)`` in the order they were given."""
        parent = self.parent
        out = []
        for ln in self.lines:
            if parent[ln.j] == ln.i:
                out.append((ln.i, ln.j, ln.r, ln.x))
            else:
                out.append((ln.j, ln.i, ln.r, ln.x))
        return tuple(out)

    def path_lines(self, node: int) -> list[int]:
        """Indices of the lines on the unique path from node 0 to ``node``."""
        _, parent_line, _, _ = self._tree
        parent = self.parent
        path = []
        while node != 0:
            path.append(int(parent_line[node]))
            node = int(parent[node])
        return path[::-1]


def _check_tree(n: int, lines: tuple[Line, ...]) -> None:
    if n < 1:
        raise TopologyError(f"need at least one prosumer node, got n={n}")
    if len(lines) != n:
        raise TopologyError(f"a tree on {n + 1} nodes has {n} lines, got {len(lines)}")
    root = list(range(n + 1))

    def find(a):
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    adj: dict[int, list[int]] = {k: [] for k in range(n + 1)}
    for ln in lines:
        for k in (ln.i, ln.j):
            if not 0 <= k <= n:
                raise TopologyError(f"line ({ln.i},{ln.j}) uses node {k} outside 0..{n}")
        if ln.i == ln.j:
            raise TopologyError(f"self-loop at node {ln.i}")
        if ln.r < 0 or ln.x < 0:
            raise TopologyError(f"line ({ln.i},{ln.j}) has negative impedance")
        ri, rj = find(ln.i), find(ln.j)
        if ri == rj:
            cycle = _path(adj, ln.i, ln.j) + [ln.i]
            raise TopologyError("lines form a cycle: " + "-".join(map(str, cycle)))
        root[ri] = rj
        adj[ln.i].append(ln.j)
        adj[ln.j].append(ln.i)
    comps: dict[int, list[int]] = {}
    for k in range(n + 1):
        comps.setdefault(find(k), []).append(k)
    if len(comps) > 1:
        detached = sorted(k for c in comps.values() if 0 not in c for k in c)
        raise TopologyError(f"nodes {detached} are disconnected from node 0")


def _path(adj, a, b):
    prev = {a: None}
    queue = deque([a])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in prev:
                prev[v] = u
                queue.append(v)
    out = [b]
    while out[-1] != a:
        out.append(prev[out[-1]])
    return out[::-1]


@dataclass(frozen=True)
class SensitivityMatrices:
    R: np.ndarray
    X: np.ndarray


def build_sensitivity_matrices(net: RadialNetwork) -> SensitivityMatrices:
    """R and X with ``R[i-1, k-1] = 2 * sum of r over the shared part of the
    root paths to nodes i and k`` (X likewise with reactances).

    The shared part of two root paths ends at their lowest common ancestor, so
    each entry is twice the cumulative impedance from node 0 to that ancestor.
    """
    parent, _, depth, order = net._tree
    cum_r = np.zeros(net.n + 1)
    cum_x = np.zeros(net.n + 1)
    for p, c, r, x in sorted(net.oriented_lines, key=lambda e: depth[e[1]]):
        cum_r[c] = cum_r[p] + r
        cum_x[c] = cum_x[p] + x

    def lca(a, b):
        while depth[a] > depth[b]:
            a = parent[a]
        while depth[b] > depth[a]:
            b = parent[b]
        while a != b:
            a, b = parent[a], parent[b]
        return a

    n = net.n
    R = np.zeros((n, n))
    X = np.zeros((n, n))
    for i in range(1, n + 1):
        for k in range(i, n + 1):
            a = lca(i, k)
            R[i - 1, k - 1] = R[k - 1, i - 1] = 2.0 * cum_r[a]
            X[i - 1, k - 1] = X[k - 1, i - 1] = 2.0 * cum_x[a]
    return SensitivityMatrices(R, X)


@dataclass(frozen=True)
class VoltageEnvelope:
    """Bounds on ``v_i(t) - v0 - sum_k X_ik q_k`` for each node i = 1..n."""

    v0: float
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.lo) >= np.asarray(self.hi)):
            bad = np.flatnonzero(np.asarray(self.lo) >= np.asarray(self.hi)) + 1
            raise ValueError(f"degenerate voltage bounds at nodes {bad.tolist()}")


def adjusted_voltage_bounds(net: RadialNetwork, v0: float, limits, q=None) -> VoltageEnvelope:
    """Translate fractional squared-voltage limits into bounds on ``R p``.

    ``limits`` is ``(frac_lo, frac_hi)``; each entry is a scalar or a length-n
    array of squared-voltage fractions of ``v0`` (so +-5% voltage is
    ``(0.95**2, 1.05**2)``).  ``q`` holds the constant reactive injections.
    """
    lo_frac, hi_frac = (np.broadcast_to(np.asarray(f, float), (net.n,)) for f in limits)
    q = np.zeros(net.n) if q is None else np.asarray(q, float)
    shift = build_sensitivity_matrices(net).X @ q
    lo = (lo_frac - 1.0) * v0 - shift
    hi = (hi_frac - 1.0) * v0 - shift
    return VoltageEnvelope(float(v0), lo, hi)


@dataclass(frozen=True)
class LineFlows:
    lines: tuple[tuple[int, int], ...]  # (parent, child)
    P: np.ndarray  # (lines, T), kW from parent to child
    Q: np.ndarray  # (lines, T), kvar
    v: np.ndarray  # (n + 1, T), squared voltages including the feeder


def recover_line_flows(net: RadialNetwork, p, q, v0: float, tol: float = 1e-6) -> LineFlows:
    """Branch flows and squared voltages from nodal injections.

    ``p`` has shape (n, T) (or (n,) for one interval).  Flows are accumulated
    leaf to root from the downstream injections, then voltages are propagated
    root to leaf with the LinDistFlow drop ``v_i - v_j = 2 (r P_ij + x Q_ij)``.
    """
    p = np.asarray(p, float)
    if p.ndim == 1:
        p = p[:, None]
    T = p.shape[1]
    q = np.zeros(net.n) if q is None else np.asarray(q, float)
    imbalance = np.abs(p.sum(axis=0)).max()
    if imbalance > tol:
        raise BalanceError(f"injections sum to {imbalance:.3g} kW, above tolerance {tol:g}")

    parent, parent_line, _, order = net._tree
    p_all = np.vstack([np.zeros(T), p])
    q_all = np.concatenate([[0.0], q])[:, None] * np.ones(T)
    # downstream injection totals, visited leaf to root
    down_p = p_all.copy()
    down_q = q_all.copy()
    for node in reversed(order[1:]):
        down_p[parent[node]] += down_p[node]
        down_q[parent[node]] += down_q[node]

    L = len(net.lines)
    P = np.zeros((L, T))
    Q = np.zeros((L, T))
    v = np.zeros((net.n + 1, T))
    v[0] = v0
    oriented = net.oriented_lines
    for node in order[1:]:
        e = parent_line[node]
        _, _, r, x = oriented[e]
        P[e] = -down_p[node]
        Q[e] = -down_q[node]
        v[node] = v[parent[node]] - 2.0 * (r * P[e] + x * Q[e])
    return LineFlows(tuple((a, b) for a, b, _, _ in oriented), P, Q, v)
