"""Per-scenario operational LP, contingency screening and the cut oracle.

The investment portfolio ``x`` only ever enters the operational LP through
row right-hand sides.  Each such row records its coupling coefficients, so the
subgradient of the optimal value with respect to ``x`` is ``M.T @ duals``.
The same row definitions are reused with ``x`` as decision variables to build
the monolithic extensive form.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .network import impedances, non_islanding_set, sensitivities
from .solver import EQ, GE, LE, LPBuilder, SolverConfig, SolverFailure, solve_lp

logger = logging.getLogger(__name__)

MODES = ("nf", "dc", "dc07", "scdc")
DERATE_DC07 = 0.7
SCREEN_THRESHOLD = 1e-6


@dataclass
class Scenario:
    """Hourly costs, availabilities and loads for one operating scenario."""

    id: str
    gen_cost: np.ndarray
    availability: np.ndarray
    load: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.gen_cost = np.atleast_2d(np.asarray(self.gen_cost, float))
        self.availability = np.atleast_2d(np.asarray(self.availability, float))
        self.load = np.atleast_2d(np.asarray(self.load, float))

    @property
    def T(self):
        return self.load.shape[0]

    def validate(self, network):
        T = self.T
        G, D = len(network.generators), len(network.loads)
        if self.gen_cost.shape != (T, G) or self.availability.shape != (T, G):
            raise ValueError(f"scenario {self.id}: generator arrays must be {T}x{G}")
        if self.load.shape != (T, D):
            raise ValueError(f"scenario {self.id}: load array must be {T}x{D}")
        if np.any(self.availability < 0) or np.any(self.availability > 1):
            raise ValueError(f"scenario {self.id}: availability outside [0, 1]")
        if np.any(self.load < 0):
            raise ValueError(f"scenario {self.id}: negative load")
        if not self.weight > 0:
            raise ValueError(f"scenario {self.id}: weight must be positive")


@dataclass
class TechParams:
    reserve_margin: float = 0.0
    contingency_rating: float = 1.0
    shed_cost: float = 10_000.0
    violation_cost: float = 2_000.0
    emission_budget: float = np.inf
    battery_duration: float | None = None

    def validate(self):
        if self.reserve_margin < 0:
            raise ValueError("reserve margin must be nonnegative")
        if self.contingency_rating < 1:
            raise ValueError("post-contingency rating multiple must be >= 1")
        if self.shed_cost < 0 or self.violation_cost <= 0:
            raise ValueError("penalty costs must be positive")
        if not self.emission_budget >= 0:
            raise ValueError("emission budget must be nonnegative")
        if self.battery_duration is not None and self.battery_duration <= 0:
            raise ValueError("battery duration must be positive")


@dataclass
class InvestmentPortfolio:
    x_g: np.ndarray
    x_es_p: np.ndarray
    x_es_e: np.ndarray
    x_br: np.ndarray
    x_em: np.ndarray

    def to_vector(self):
        return np.concatenate([self.x_g, self.x_es_p, self.x_es_e, self.x_br, self.x_em]).astype(float)


class PortfolioSpace:
    """Layout, bounds and costs of the flat investment vector.

    The vector is ``[x_g, x_es_p, x_es_e, x_br, x_em]`` with one emission
    allocation per scenario.
    """

    def __init__(self, network, params, n_scenarios):
        G, S, b = len(network.generators), len(network.storage), network.n_branch
        sizes = [("g", G), ("es_p", S), ("es_e", S), ("br", b), ("em", n_scenarios)]
        self.slices = {}
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start
        budget = params.emission_budget
        em_cap = budget if np.isfinite(budget) else 1e12
        self.upper = np.concatenate([
            [g.x_max for g in network.generators],
            [s.x_power_max for s in network.storage],
            [s.x_energy_max for s in network.storage],
            network.branch_array("x_br_max"),
            np.full(n_scenarios, em_cap),
        ]).astype(float)
        self.cost = np.concatenate([
            [g.invest_cost for g in network.generators],
            [s.power_cost for s in network.storage],
            [s.energy_cost for s in network.storage],
            network.branch_array("c_br"),
            np.zeros(n_scenarios),
        ]).astype(float)
        self.budget = budget
        self.n_scenarios = n_scenarios

    def index(self, name):
        return np.arange(self.size)[self.slices[name]]

    def split(self, x):
        x = np.asarray(x, float)
        return InvestmentPortfolio(*(x[self.slices[k]] for k in ("g", "es_p", "es_e", "br", "em")))

    def contains(self, x, tol=1e-9):
        x = np.asarray(x, float)
        ok = np.all(x >= -tol) and np.all(x <= self.upper + tol)
        return bool(ok and x[self.slices["em"]].sum() <= self.budget + tol)


@dataclass
class OperationsModel:
    """Shared, read-only context for all scenario subproblems at one ``x_hat``."""

    network: object
    params: TechParams
    directed_basis: np.ndarray
    mode: str = "scdc"
    x_hat_br: np.ndarray | None = None
    non_islanding: tuple = ()
    chi: np.ndarray = field(default=None, repr=False)
    sens: object = field(default=None, repr=False)

    @classmethod
    def build(cls, network, params, directed_basis, mode="scdc", x_hat_br=None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        D = np.asarray(directed_basis, dtype=float)
        D = D.reshape(D.size // network.n_branch if network.n_branch else 0, network.n_branch)
        x_hat = np.zeros(network.n_branch) if x_hat_br is None else np.asarray(x_hat_br, float)
        B = non_islanding_set(np.abs(D))
        chi = impedances(network, x_hat)
        sens = sensitivities(network, x_hat, B) if mode == "scdc" else None
        return cls(network, params, D, mode, x_hat, B, chi, sens)

    def with_x_hat(self, x_hat_br):
        return OperationsModel.build(self.network, self.params, self.directed_basis, self.mode, x_hat_br)

    @property
    def has_contingencies(self):
        return self.mode == "scdc"

    @property
    def base_rating(self):
        w = self.network.branch_array("w_br")
        return DERATE_DC07 * w if self.mode == "dc07" else w

    def full_contingency_set(self, T):
        if not self.has_contingencies:
            return frozenset()
        b = self.network.n_branch
        return frozenset((t, i, j) for t in range(T) for j in self.non_islanding
                         for i in range(b) if i != j)


@dataclass
class OperationalDecision:
    p_g: np.ndarray
    r_g: np.ndarray
    p_chg: np.ndarray
    p_dis: np.ndarray
    r_dis: np.ndarray
    q: np.ndarray
    p_sh: np.ndarray
    p_dc: np.ndarray
    p_ni: np.ndarray
    p_br: np.ndarray
    s_c: dict


@dataclass
class SubproblemLP:
    lp: object
    coupling: sp.csr_matrix
    contingencies: tuple
    T: int


@dataclass
class OracleResult:
    y: OperationalDecision
    theta: float
    g: np.ndarray
    sigma: float
    new_contingencies: frozenset
    s_hat: dict = field(default_factory=dict)


class _RowSink:
    """Adds rows whose RHS may depend on the portfolio.

    With a numeric ``x`` the dependence is folded into the RHS and recorded in
    coupling triplets; with variable indices ``x`` becomes LHS columns.
    """

    def __init__(self, builder, x=None, x_vars=None, n_x=0):
        self.b = builder
        self.x = None if x is None else np.asarray(x, float)
        self.x_vars = x_vars
        self.n_x = n_x
        self.couple = ([], [], [])

    def row(self, cols, vals, sense, rhs, xk=None, xc=None, group=None):
        cols = np.asarray(cols, int).ravel()
        vals = np.broadcast_to(np.asarray(vals, float), cols.shape).ravel()
        if xk is None:
            return self.b.add_row(cols, vals, sense, rhs, group)
        xk = np.atleast_1d(np.asarray(xk, int))
        xc = np.broadcast_to(np.atleast_1d(np.asarray(xc, float)), xk.shape)
        if self.x_vars is not None:
            return self.b.add_row(np.concatenate([cols, self.x_vars[xk]]),
                                  np.concatenate([vals, -xc]), sense, rhs, group)
        r = self.b.add_row(cols, vals, sense, rhs + float(xc @ self.x[xk]), group)
        self.couple[0].extend([r] * xk.size)
        self.couple[1].extend(xk.tolist())
        self.couple[2].extend(xc.tolist())
        return r


def _add_scenario(sink, model, space, scenario, contingencies, kvl, position=0, prefix="", weight=1.0):
    net, prm = model.network, model.params
    T = scenario.T
    G, S, D, b, n = len(net.generators), len(net.storage), len(net.loads), net.n_branch, net.n_bus
    ndc = len(net.hvdc)
    bld = sink.b
    xg, xp, xe, xbr = (space.index(k) for k in ("g", "es_p", "es_e", "br"))
    xem = space.index("em")[position]

    v = lambda name, shape, **kw: bld.add_vars(prefix + name, shape, **kw)
    pg = v("p_g", (T, G), cost=weight * scenario.gen_cost)
    rg = v("r_g", (T, G))
    pchg = v("p_chg", (T, S))
    pdis = v("p_dis", (T, S))
    rdis = v("r_dis", (T, S))
    q = v("q", (T, S))
    psh = v("p_sh", (T, D), ub=scenario.load, cost=weight * prm.shed_cost)
    wdc = np.array([dc.capacity for dc in net.hvdc], float)
    pdc = v("p_dc", (T, ndc), lb=-wdc, ub=wdc)
    pbr = v("p_br", (T, b), lb=-np.inf)
    ctg = tuple(sorted(contingencies))
    sc = v("s_c", len(ctg), cost=weight * prm.violation_cost)

    wg = np.array([g.capacity for g in net.generators], float)
    ramp = np.array([g.ramp for g in net.generators], float)
    emis = np.array([g.emission for g in net.generators], float)
    for t in range(T):
        for k in range(G):
            a = scenario.availability[t, k]
            sink.row([pg[t, k], rg[t, k]], 1.0, LE, a * wg[k], xg[k], a)
            if t + 1 < T:
                cols = [pg[t + 1, k], pg[t, k]]
                sink.row(cols, [1.0, -1.0], GE, -ramp[k] * wg[k], xg[k], -ramp[k])
                sink.row(cols, [1.0, -1.0], LE, ramp[k] * wg[k], xg[k], ramp[k])
    fossil = np.flatnonzero(emis > 0)
    if fossil.size:
        cols = pg[:, fossil].ravel()
        sink.row(cols, np.tile(emis[fossil], T), LE, 0.0, xem, 1.0, group=prefix + "emission")

    for k, st in enumerate(net.storage):
        eta, gam = st.efficiency, st.soc_ratio
        for t in range(T):
            sink.row([pchg[t, k], pdis[t, k], rdis[t, k]], 1.0, LE, st.power, xp[k], 1.0)
            sink.row([q[t, k]], 1.0, LE, st.energy, xe[k], 1.0)
            sink.row([q[t, k], rdis[t, k]], [1.0, -1.0], GE, 0.0)
            if t == 0:
                sink.row([q[t, k], pchg[t, k], pdis[t, k]], [1.0, -eta, 1.0 / eta], EQ,
                         gam * st.energy, xe[k], gam)
            else:
                sink.row([q[t, k], q[t - 1, k], pchg[t, k], pdis[t, k]],
                         [1.0, -1.0, -eta, 1.0 / eta], EQ, 0.0)
        sink.row([q[T - 1, k]], 1.0, EQ, gam * st.energy, xe[k], gam)

    if prm.reserve_margin > 0:
        for t in range(T):
            need = prm.reserve_margin * scenario.load[t].sum()
            cols = np.concatenate([rg[t], rdis[t]])
            if cols.size or need > 0:
                sink.row(cols, 1.0, GE, need)

    Abr = net.branch_incidence
    Adc = net.hvdc_incidence
    for t in range(T):
        for i in range(n):
            cols, vals = [], []
            j_br = np.flatnonzero(Abr[i])
            cols += pbr[t, j_br].tolist()
            vals += Abr[i, j_br].tolist()
            for k, gen in enumerate(net.generators):
                if gen.bus == i:
                    cols.append(pg[t, k])
                    vals.append(-1.0)
            for k, st in enumerate(net.storage):
                if st.bus == i:
                    cols += [pdis[t, k], pchg[t, k]]
                    vals += [-1.0, 1.0]
            k_dc = np.flatnonzero(Adc[i])
            cols += pdc[t, k_dc].tolist()
            vals += (-Adc[i, k_dc]).tolist()
            rhs = 0.0
            for k, ld in enumerate(net.loads):
                if ld.bus == i:
                    cols.append(psh[t, k])
                    vals.append(-1.0)
                    rhs -= scenario.load[t, k]
            sink.row(cols, vals, EQ, rhs)

    rating = model.base_rating
    for t in range(T):
        for j in range(b):
            sink.row([pbr[t, j]], 1.0, LE, rating[j], xbr[j], 1.0)
            sink.row([pbr[t, j]], -1.0, LE, rating[j], xbr[j], 1.0)

    if model.mode != "nf":
        if kvl == "cycle":
            Dchi = model.directed_basis * model.chi[None, :]
            for t in range(T):
                for row in Dchi:
                    nz = np.flatnonzero(row)
                    sink.row(pbr[t, nz], row[nz], EQ, 0.0)
        elif kvl == "angle":
            lo = np.full(n, -np.inf)
            hi = np.full(n, np.inf)
            lo[net.slack_bus] = hi[net.slack_bus] = 0.0
            theta = v("theta", (T, n), lb=np.tile(lo, (T, 1)), ub=np.tile(hi, (T, 1)))
            susc = 1.0 / model.chi
            for t in range(T):
                for j, br in enumerate(net.branches):
                    sink.row([pbr[t, j], theta[t, br.to_bus], theta[t, br.from_bus]],
                             [1.0, -susc[j], susc[j]], EQ, 0.0)
        else:
            raise ValueError(f"unknown KVL formulation {kvl!r}")

    if ctg:
        if not model.has_contingencies:
            raise ValueError(f"mode {model.mode!r} does not model contingencies")
        lam = model.sens.lodf
        eta_c = prm.contingency_rating
        w = net.branch_array("w_br")
        for m, (t, i, j) in enumerate(ctg):
            cols = [pbr[t, i], pbr[t, j], sc[m]]
            sink.row(cols, [1.0, lam[i, j], 1.0], GE, -eta_c * w[i], xbr[i], -eta_c)
            sink.row(cols, [1.0, lam[i, j], -1.0], LE, eta_c * w[i], xbr[i], eta_c)
    return ctg


def _check_inputs(model, space, x, scenario, contingencies):
    scenario.validate(model.network)
    if x is not None:
        x = np.asarray(x, float)
        if x.shape != (space.size,):
            raise ValueError(f"portfolio vector must have length {space.size}, got {x.shape}")
    full = model.full_contingency_set(scenario.T)
    extra = set(contingencies) - full
    if extra:
        raise ValueError(f"contingencies outside the full set: {sorted(extra)[:5]}")


def build_subproblem(model, space, x, scenario, contingencies=(), kvl="cycle", position=0):
    """Operational LP at fixed portfolio ``x`` for one scenario."""
    _check_inputs(model, space, x, scenario, contingencies)
    builder = LPBuilder()
    sink = _RowSink(builder, x=x, n_x=space.size)
    ctg = _add_scenario(sink, model, space, scenario, contingencies, kvl, position)
    lp = builder.build()
    rows, cols, vals = sink.couple
    M = sp.csr_matrix((vals, (rows, cols)), shape=(lp.n_rows, space.size))
    return SubproblemLP(lp, M, ctg, scenario.T)


def decision_from_solution(model, scenario, lp, xsol, contingencies, prefix=""):
    net = model.network
    vb = lp.var_blocks
    get = lambda name: xsol[vb[prefix + name]]
    p_g, p_dis, p_chg, p_sh, p_dc = get("p_g"), get("p_dis"), get("p_chg"), get("p_sh"), get("p_dc")
    p_ni = (p_g @ net.generator_incidence.T
            + (p_dis - p_chg) @ net.storage_incidence.T
            + p_dc @ net.hvdc_incidence.T
            - (scenario.load - p_sh) @ net.load_incidence.T)
    s_c = dict(zip(contingencies, get("s_c").tolist()))
    return OperationalDecision(p_g, get("r_g"), p_chg, p_dis, get("r_dis"), get("q"),
                               p_sh, p_dc, p_ni, get("p_br"), s_c)


def screen_contingencies(p_br, model, x_br, exclude=frozenset(), threshold=SCREEN_THRESHOLD):
    """Implied post-contingency overloads not covered by ``exclude``.

    Returns ``(s_hat, sigma, new)`` where ``s_hat`` maps each ``(t, i, j)``
    above ``threshold`` to its overload in MW.
    """
    if not model.has_contingencies or not model.non_islanding:
        return {}, 0.0, frozenset()
    prm = model.params
    p_br = np.atleast_2d(np.asarray(p_br, float))
    B = np.array(model.non_islanding, int)
    lam_B = model.sens.lodf[:, B]
    limit = prm.contingency_rating * (model.network.branch_array("w_br") + np.asarray(x_br, float))
    b = p_br.shape[1]
    self_outage = np.arange(b)[:, None] == B[None, :]
    s_hat = {}
    for t in range(p_br.shape[0]):
        post = p_br[t][:, None] + lam_B * p_br[t, B][None, :]
        over = np.abs(post) - limit[:, None]
        over[self_outage] = -np.inf
        for i, jj in zip(*np.nonzero(over > threshold)):
            key = (t, int(i), int(B[jj]))
            if key not in exclude:
                s_hat[key] = float(over[i, jj])
    sigma = prm.violation_cost * sum(s_hat.values())
    return s_hat, sigma, frozenset(s_hat)


def oracle(model, space, x, scenario, contingencies=frozenset(), config=None, position=0, kvl="cycle"):
    """Solve the relaxed subproblem, return value, subgradient and new violations."""
    sub = build_subproblem(model, space, x, scenario, contingencies, kvl=kvl, position=position)
    sol = solve_lp(sub.lp, config or SolverConfig())
    if not sol.ok:
        raise SolverFailure(f"subproblem for scenario {scenario.id} ended with status {sol.status}: {sol.message}")
    y = decision_from_solution(model, scenario, sub.lp, sol.x, sub.contingencies)
    g = sub.coupling.T @ sol.duals
    x_br = np.asarray(x, float)[space.slices["br"]]
    s_hat, sigma, new = screen_contingencies(y.p_br, model, x_br, exclude=frozenset(contingencies))
    return OracleResult(y, sol.objective, np.asarray(g).ravel(), sigma, new, s_hat)


def subproblem_value(model, space, x, scenario, contingencies=None, config=None, position=0, kvl="cycle"):
    """Optimal value of the subproblem; ``contingencies=None`` means the full set."""
    if contingencies is None:
        contingencies = model.full_contingency_set(scenario.T)
    sub = build_subproblem(model, space, x, scenario, contingencies, kvl=kvl, position=position)
    sol = solve_lp(sub.lp, config or SolverConfig())
    if not sol.ok:
        raise SolverFailure(f"subproblem for scenario {scenario.id} ended with status {sol.status}")
    return sol.objective, sub, sol


def extensive_form(model, space, scenarios, config=None, kvl="cycle", fixed_x=None):
    """Monolithic LP over the portfolio and every scenario with all contingencies.

    Returns ``(objective, x, lp_solution)``.
    """
    net, prm = model.network, model.params
    builder = LPBuilder()
    if fixed_x is None:
        xv = builder.add_vars("x", space.size, lb=0.0, ub=space.upper, cost=space.cost)
    else:
        fixed_x = np.asarray(fixed_x, float)
        xv = builder.add_vars("x", space.size, lb=fixed_x, ub=fixed_x, cost=space.cost)
    em = xv[space.slices["em"]]
    if np.isfinite(space.budget) and em.size:
        builder.add_row(em, 1.0, LE, space.budget)
    if prm.battery_duration is not None:
        for kp, ke in zip(space.index("es_p"), space.index("es_e")):
            builder.add_row([xv[ke], xv[kp]], [1.0, -prm.battery_duration], EQ, 0.0)
    sink = _RowSink(builder, x_vars=xv, n_x=space.size)
    for w, sc in enumerate(scenarios):
        sc.validate(net)
        _add_scenario(sink, model, space, sc, model.full_contingency_set(sc.T), kvl,
                      position=w, prefix=f"s{w}.", weight=sc.weight)
    lp = builder.build()
    sol = solve_lp(lp, config or SolverConfig())
    if not sol.ok:
        raise SolverFailure(f"extensive form ended with status {sol.status}: {sol.message}")
    return sol.objective, sol.x[xv], sol


@dataclass
class CostBreakdown:
    investment: float
    operating: float
    shed_penalty: float
    violation_penalty: float
    shed_mwh: float
    violation_mwh: float

    @property
    def total(self):
        return self.investment + self.operating + self.shed_penalty + self.violation_penalty

    def as_dict(self):
        out = {
            "investment": self.investment,
            "operating": self.operating,
            "shed_penalty": self.shed_penalty,
            "violation_penalty": self.violation_penalty,
            "total": self.total,
            "shed_gwh": self.shed_mwh / 1e3,
            "viol_gwh": self.violation_mwh / 1e3,
        }
        return {k: float(v) for k, v in out.items()}


def operating_breakdown(params, scenario, y, extra_violation_mw=0.0):
    """(operating, shed, violation) costs and energies of one dispatch, unweighted."""
    op = float(np.sum(scenario.gen_cost * y.p_g))
    shed = float(y.p_sh.sum())
    viol = float(sum(y.s_c.values())) + extra_violation_mw
    return op, params.shed_cost * shed, params.violation_cost * viol, shed, viol


def evaluate_portfolio(network, params, directed_basis, scenarios, x, mode="scdc",
                       impedance_feedback=True, config=None, kvl="cycle"):
    """Total cost of a fixed portfolio under the chosen physics.

    With ``impedance_feedback`` the impedances and LODFs follow the portfolio's
    own branch capacities; all contingencies are enforced explicitly.
    """
    space = PortfolioSpace(network, params, len(scenarios))
    x = np.asarray(x, float)
    x_hat = x[space.slices["br"]] if impedance_feedback else None
    model = OperationsModel.build(network, params, directed_basis, mode, x_hat)
    inv = float(space.cost @ x)
    parts = np.zeros(5)
    decisions = []
    for w, sc in enumerate(scenarios):
        _, sub, sol = subproblem_value(model, space, x, sc, config=config, position=w, kvl=kvl)
        y = decision_from_solution(model, sc, sub.lp, sol.x, sub.contingencies)
        decisions.append(y)
        parts += sc.weight * np.array(operating_breakdown(params, sc, y))
    bd = CostBreakdown(inv, *parts)
    return bd, decisions
