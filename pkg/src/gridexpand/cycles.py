"""Fundamental and minimal cycle bases of the branch graph.

Cycles are stored as rows of a 0/1 matrix over branch indices, so parallel
branches between the same bus pair are handled naturally.  The minimal basis
is reached by exchanging each basis row for the shortest cycle that keeps the
set independent, found with a small integer program.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .network import NetworkStructureError, is_connected
from .solver import EQ, LPBuilder, SolverConfig, SolverFailure, solve_ip


class CycleError(ValueError):
    """An edge set that should be one simple cycle is not."""


def gf2_rank(C):
    """Rank of a 0/1 matrix over GF(2)."""
    rows = [int("".join("1" if v else "0" for v in row), 2) if len(row) else 0
            for row in np.asarray(C, dtype=bool)]
    rank = 0
    pivots = {}
    for r in rows:
        while r:
            top = r.bit_length() - 1
            if top not in pivots:
                pivots[top] = r
                rank += 1
                break
            r ^= pivots[top]
    return rank


def fundamental_basis(network, root=None):
    """Cycle basis from a BFS spanning tree rooted at ``root`` (default slack)."""
    n, edges = network.n_bus, network.edges
    if not is_connected(n, edges):
        raise NetworkStructureError("cycle basis needs a connected graph")
    root = network.slack_bus if root is None else root
    adj = [[] for _ in range(n)]
    for j, (u, v) in enumerate(edges):
        adj[u].append((v, j))
        adj[v].append((u, j))
    parent_edge = [-1] * n
    parent = [-1] * n
    depth = [0] * n
    seen = [False] * n
    seen[root] = True
    queue = deque([root])
    tree = set()
    while queue:
        u = queue.popleft()
        for v, j in adj[u]:
            if not seen[v]:
                seen[v] = True
                parent[v], parent_edge[v], depth[v] = u, j, depth[u] + 1
                tree.add(j)
                queue.append(v)

    rows = []
    for j, (u, v) in enumerate(edges):
        if j in tree:
            continue
        row = np.zeros(len(edges), dtype=np.int8)
        row[j] = 1
        a, b = u, v
        while a != b:
            if depth[a] < depth[b]:
                a, b = b, a
            row[parent_edge[a]] ^= 1
            a = parent[a]
        rows.append(row)
    if not rows:
        return np.zeros((0, len(edges)), dtype=np.int8)
    return np.array(rows, dtype=np.int8)


def is_simple_cycle(edge_row, network):
    """True when the selected branches form one connected 2-regular subgraph."""
    sel = np.flatnonzero(np.asarray(edge_row))
    if sel.size == 0:
        return False
    degree = {}
    adj = {}
    for j in sel:
        br = network.branches[j]
        for a, b in ((br.from_bus, br.to_bus), (br.to_bus, br.from_bus)):
            degree[a] = degree.get(a, 0) + 1
            adj.setdefault(a, []).append(b)
    if any(d != 2 for d in degree.values()):
        return False
    start = next(iter(adj))
    seen = {start}
    stack = [start]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == len(degree)


def orient_cycle(edge_row, network):
    """Signed incidence row of a simple cycle, +1 where traversal runs from->to."""
    row = np.asarray(edge_row)
    if not is_simple_cycle(row, network):
        raise CycleError("edge set is not a single simple cycle")
    sel = [int(j) for j in np.flatnonzero(row)]
    incident = {}
    for j in sel:
        br = network.branches[j]
        incident.setdefault(br.from_bus, []).append(j)
        incident.setdefault(br.to_bus, []).append(j)
    signed = np.zeros(network.n_branch, dtype=np.int8)
    first = network.branches[sel[0]]
    node, used = first.from_bus, set()
    edge = sel[0]
    while edge not in used:
        used.add(edge)
        br = network.branches[edge]
        if node == br.from_bus:
            signed[edge], node = 1, br.to_bus
        else:
            signed[edge], node = -1, br.from_bus
        nxt = [e for e in incident[node] if e not in used]
        if not nxt:
            break
        edge = nxt[0]
    return signed


def improve_cycle_ip(C, k, config=None):
    """Shortest cycle in ``C[k] + span(other rows)``, returned as a 0/1 row."""
    C = np.asarray(C, dtype=int)
    n_c, b = C.shape
    u_max = math.ceil(n_c / 2)
    lower = np.zeros(n_c)
    lower[k] = 1.0
    builder = LPBuilder()
    w = builder.add_vars("w", n_c, lb=lower, ub=1.0, integer=True)
    u = builder.add_vars("u", b, lb=0.0, ub=u_max, integer=True)
    v = builder.add_vars("v", b, lb=0.0, ub=1.0, cost=1.0, integer=True)
    for j in range(b):
        kappa = np.flatnonzero(C[:, j])
        cols = np.concatenate([w[kappa], [u[j], v[j]]])
        vals = np.concatenate([np.ones(kappa.size), [-2.0, -1.0]])
        builder.add_row(cols, vals, EQ, 0.0)
    sol = solve_ip(builder.build(), config)
    if not sol.ok:
        raise SolverFailure(f"cycle improvement IP for row {k} ended with status {sol.status}: {sol.message}")
    return np.rint(sol.x[v]).astype(np.int8)


def minimal_cycle_basis(C0, network, config=None):
    """Exchange every row of ``C0`` once for its IP-optimal replacement.

    Returns ``(C, D)`` with ``D`` the oriented copy of ``C``.
    """
    C = np.array(C0, dtype=np.int8, copy=True)
    n_c = C.shape[0]
    D = np.zeros_like(C)
    for k in range(n_c):
        C[k] = improve_cycle_ip(C, k, config)
        if gf2_rank(C) != n_c:
            raise RuntimeError(f"cycle exchange at row {k} broke independence of the basis")
        D[k] = orient_cycle(C[k], network)
    return C, D


def cycle_edge_lists(C):
    return [np.flatnonzero(row).tolist() for row in np.asarray(C)]


def basis_summary(C):
    lengths = np.asarray(C, dtype=bool).sum(axis=1) if len(C) else np.zeros(0, int)
    return {
        "n_cycles": int(len(lengths)),
        "total_length": int(lengths.sum()),
        "longest": int(lengths.max()) if lengths.size else 0,
    }


class MinimalCycleBasis(BaseEstimator):
    """Minimal cycle basis of a network's branch graph.

    ``fit`` records the starting fundamental basis in ``fundamental_``, the
    minimal undirected basis in ``basis_`` and its oriented form in
    ``directed_``.  With ``minimal=False`` the fundamental basis is kept.
    """

    def __init__(self, root=None, minimal=True, solver_config=None):
        self.root = root
        self.minimal = minimal
        self.solver_config = solver_config

    def fit(self, network, y=None):
        self.fundamental_ = fundamental_basis(network, self.root)
        if self.minimal:
            self.basis_, self.directed_ = minimal_cycle_basis(
                self.fundamental_, network, self.solver_config or SolverConfig())
        else:
            self.basis_ = self.fundamental_.copy()
            self.directed_ = np.array([orient_cycle(r, network) for r in self.basis_],
                                      dtype=np.int8).reshape(self.basis_.shape)
        self.n_cycles_ = self.basis_.shape[0]
        return self

    def transform(self, network=None):
        check_is_fitted(self, "directed_")
        return self.directed_

    def summary(self):
        check_is_fitted(self, "basis_")
        out = basis_summary(self.basis_)
        out["fundamental_total_length"] = basis_summary(self.fundamental_)["total_length"]
        out["cycles"] = cycle_edge_lists(self.basis_)
        return out
