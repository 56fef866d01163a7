"""Static grid description, impedance feedback, and PTDF/LODF sensitivities.

Sign conventions follow the nodal balance ``p_ni = A_br @ p_br`` with
``A_br[from, j] = -1`` and ``A_br[to, j] = +1``.  The reduced incidence ``A``
used by the sensitivity formulas is ``A_br.T`` with the slack column dropped.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

ISLANDING_TOL = 1e-9


class NetworkStructureError(ValueError):
    """The grid graph is unusable (disconnected, degenerate branch, bad ids)."""


class IslandingError(NetworkStructureError):
    """An outage was requested for a branch whose removal splits the grid."""


@dataclass(frozen=True)
class Bus:
    id: int
    is_slack: bool = False


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    x0: float
    w_br: float
    x_br_max: float = 0.0
    c_br: float = 0.0


@dataclass(frozen=True)
class HvdcLine:
    id: int
    from_bus: int
    to_bus: int
    capacity: float


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    capacity: float
    x_max: float = 0.0
    invest_cost: float = 0.0
    ramp: float = 1.0
    emission: float = 0.0


@dataclass(frozen=True)
class Storage:
    id: int
    bus: int
    power: float
    energy: float
    x_power_max: float = 0.0
    x_energy_max: float = 0.0
    power_cost: float = 0.0
    energy_cost: float = 0.0
    efficiency: float = 1.0
    soc_ratio: float = 0.5


@dataclass(frozen=True)
class Load:
    id: int
    bus: int


@dataclass
class Network:
    buses: tuple
    branches: tuple
    hvdc: tuple = ()
    generators: tuple = ()
    storage: tuple = ()
    loads: tuple = ()
    slack_bus: int = 0

    def __post_init__(self):
        self.buses = tuple(self.buses)
        self.branches = tuple(self.branches)
        self.hvdc = tuple(self.hvdc)
        self.generators = tuple(self.generators)
        self.storage = tuple(self.storage)
        self.loads = tuple(self.loads)
        self.validate()

    @classmethod
    def from_edges(cls, n_bus, edges, x0=0.1, w_br=100.0, slack_bus=0, **devices):
        """Convenience constructor for bare graphs given as ``(from, to)`` pairs."""
        x0 = np.broadcast_to(np.asarray(x0, float), (len(edges),))
        w_br = np.broadcast_to(np.asarray(w_br, float), (len(edges),))
        branches = [Branch(j, int(u), int(v), float(x0[j]), float(w_br[j]))
                    for j, (u, v) in enumerate(edges)]
        buses = [Bus(i, i == slack_bus) for i in range(n_bus)]
        return cls(buses, branches, slack_bus=slack_bus, **devices)

    # -- sizes --------------------------------------------------------------
    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_branch(self):
        return len(self.branches)

    @property
    def edges(self):
        return [(br.from_bus, br.to_bus) for br in self.branches]

    def validate(self):
        n = len(self.buses)
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise NetworkStructureError(f"duplicate bus id(s): {dup}")
        if sorted(ids) != list(range(n)):
            raise NetworkStructureError("bus ids must be contiguous 0..n-1")
        if not 0 <= self.slack_bus < n:
            raise NetworkStructureError(f"slack bus {self.slack_bus} is not a valid bus")
        flagged = [b.id for b in self.buses if b.is_slack]
        if flagged and flagged != [self.slack_bus]:
            raise NetworkStructureError(f"slack flags {flagged} disagree with slack_bus={self.slack_bus}")
        for kind, items in (("branch", self.branches), ("hvdc", self.hvdc)):
            item_ids = [it.id for it in items]
            if item_ids != list(range(len(items))):
                raise NetworkStructureError(f"{kind} ids must be contiguous 0..{len(items) - 1}")
            for it in items:
                if not (0 <= it.from_bus < n and 0 <= it.to_bus < n):
                    raise NetworkStructureError(f"{kind} {it.id} references unknown bus")
                if it.from_bus == it.to_bus:
                    raise NetworkStructureError(f"{kind} {it.id} is a self-loop")
        for br in self.branches:
            if not br.x0 > 0:
                raise NetworkStructureError(f"branch {br.id}: base impedance must be > 0")
            if not br.w_br > 0:
                raise NetworkStructureError(f"branch {br.id}: zero base capacity makes impedance degenerate")
            if br.x_br_max < 0 or br.c_br < 0:
                raise NetworkStructureError(f"branch {br.id}: negative expansion limit or cost")
        for dc in self.hvdc:
            if dc.capacity < 0:
                raise NetworkStructureError(f"hvdc {dc.id}: negative capacity")
        for kind, items in (("generator", self.generators), ("storage", self.storage), ("load", self.loads)):
            if [it.id for it in items] != list(range(len(items))):
                raise NetworkStructureError(f"{kind} ids must be contiguous 0..{len(items) - 1}")
            for it in items:
                if not 0 <= it.bus < n:
                    raise NetworkStructureError(f"{kind} {it.id} references unknown bus {it.bus}")
        for s in self.storage:
            if not 0 < s.efficiency <= 1:
                raise NetworkStructureError(f"storage {s.id}: efficiency must lie in (0, 1]")
            if not 0 <= s.soc_ratio <= 1:
                raise NetworkStructureError(f"storage {s.id}: soc ratio must lie in [0, 1]")
        if not is_connected(n, self.edges):
            raise NetworkStructureError("AC network is not connected")

    # -- arrays -------------------------------------------------------------
    def branch_array(self, attr):
        return np.array([getattr(br, attr) for br in self.branches], float)

    @property
    def branch_incidence(self):
        """``A_br`` of shape (n, b)."""
        A = np.zeros((self.n_bus, self.n_branch))
        for j, br in enumerate(self.branches):
            A[br.from_bus, j] = -1.0
            A[br.to_bus, j] = 1.0
        return A

    @property
    def hvdc_incidence(self):
        A = np.zeros((self.n_bus, len(self.hvdc)))
        for k, dc in enumerate(self.hvdc):
            A[dc.from_bus, k] = -1.0
            A[dc.to_bus, k] = 1.0
        return A

    def _device_map(self, devices):
        A = np.zeros((self.n_bus, len(devices)))
        for k, dev in enumerate(devices):
            A[dev.bus, k] = 1.0
        return A

    @property
    def generator_incidence(self):
        return self._device_map(self.generators)

    @property
    def storage_incidence(self):
        return self._device_map(self.storage)

    @property
    def load_incidence(self):
        return self._device_map(self.loads)


def is_connected(n_bus, edges):
    if n_bus == 0:
        return False
    adj = [[] for _ in range(n_bus)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == n_bus


def impedance(branch, x_br):
    """Parallel-circuit impedance of ``branch`` after adding ``x_br`` MW."""
    if x_br < 0:
        raise ValueError(f"branch {branch.id}: expansion must be nonnegative, got {x_br}")
    if branch.w_br <= 0:
        raise NetworkStructureError(f"branch {branch.id}: impedance undefined for zero base capacity")
    return branch.x0 * branch.w_br / (branch.w_br + x_br)


def impedances(network, x_br=None):
    x0 = network.branch_array("x0")
    w = network.branch_array("w_br")
    if x_br is None:
        return x0.copy()
    x_br = np.asarray(x_br, float)
    if x_br.shape != x0.shape:
        raise ValueError(f"expected {x0.size} branch expansions, got shape {x_br.shape}")
    if np.any(x_br < 0):
        raise ValueError("branch expansions must be nonnegative")
    return x0 * w / (w + x_br)


def incidence_matrix(network):
    """Return ``(A_full, A)``: the b x n signed incidence and its slack-reduced form."""
    if not is_connected(network.n_bus, network.edges):
        raise NetworkStructureError("AC network is not connected")
    A_full = network.branch_incidence.T
    A = np.delete(A_full, network.slack_bus, axis=1)
    return A_full, A


def non_slack(network):
    return np.delete(np.arange(network.n_bus), network.slack_bus)


def _factor_laplacian(network, x_br):
    _, A = incidence_matrix(network)
    B = 1.0 / impedances(network, x_br)
    lap = A.T @ (B[:, None] * A)
    try:
        factor = sla.cho_factor(lap, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NetworkStructureError("reduced Laplacian is singular") from exc
    return A, B, factor


def ptdf(network, x_br=None):
    """PTDF matrix ``B A (A' B A)^-1`` of shape (b, n-1), slack column removed."""
    A, B, factor = _factor_laplacian(network, x_br)
    if A.shape[1] == 0:
        return np.zeros((network.n_branch, 0))
    # (A'BA)^-1 is symmetric so Phi' = (A'BA)^-1 (BA)'
    return sla.cho_solve(factor, (B[:, None] * A).T).T


def lodf(network, x_br=None, non_islanding=None, phi=None):
    """LODF columns for the requested outages; other columns are NaN.

    Entry ``(i, j)`` is the share of branch ``j``'s pre-outage flow that moves
    onto branch ``i`` when ``j`` trips.  The diagonal of each computed column is
    set to -1 so that ``p_j + lodf[j, j] * p_j`` is the zero post-outage flow.
    """
    if phi is None:
        phi = ptdf(network, x_br)
    _, A = incidence_matrix(network)
    b = network.n_branch
    if non_islanding is None:
        non_islanding = range(b)
    outages = np.array(sorted(non_islanding), dtype=int)
    transfer = phi @ A.T
    lam = np.full((b, b), np.nan)
    if outages.size == 0:
        return lam
    denom = 1.0 - np.diag(transfer)[outages]
    bad = np.abs(denom) < ISLANDING_TOL
    if bad.any():
        raise IslandingError(f"outage of branch(es) {outages[bad].tolist()} islands the network")
    lam[:, outages] = transfer[:, outages] / denom
    lam[outages, outages] = -1.0
    return lam


def non_islanding_set(cycle_basis):
    """Branches that appear in at least one basis cycle (the non-bridges)."""
    C = np.asarray(cycle_basis)
    if C.size == 0:
        return ()
    return tuple(int(j) for j in np.flatnonzero(np.any(C != 0, axis=0)))


@dataclass(frozen=True)
class SensitivityMatrices:
    ptdf: np.ndarray
    lodf: np.ndarray
    evaluated_at: np.ndarray
    non_islanding: tuple = field(default=())

    def __post_init__(self):
        for arr in (self.ptdf, self.lodf, self.evaluated_at):
            arr.setflags(write=False)


def sensitivities(network, x_br, non_islanding):
    x_br = np.zeros(network.n_branch) if x_br is None else np.array(x_br, float)
    phi = ptdf(network, x_br)
    lam = lodf(network, x_br, non_islanding, phi=phi)
    return SensitivityMatrices(phi, lam, x_br, tuple(sorted(non_islanding)))
