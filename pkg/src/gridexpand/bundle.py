"""Level-bundle method with analytic-center iterates and interleaved contingencies.

The master works in a reduced coordinate ``z`` with ``x = P @ z``; ``P`` is the
identity unless battery energy is tied to power by a fixed duration.  Cuts are
stored per scenario, unweighted, and weighted only when the master sums them.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cycles import MinimalCycleBasis
from .solver import LE, LPBuilder, SolverConfig, SolverFailure, solve_lp
from .subproblem import (
    CostBreakdown,
    OperationsModel,
    PortfolioSpace,
    evaluate_portfolio,
    operating_breakdown,
    oracle,
)

logger = logging.getLogger(__name__)

TYPE2_TOL = 1e-8
INCUMBENT_TIE = 1e-9


class EmptyInteriorError(RuntimeError):
    pass


class MasterSpace:
    """Reduced investment coordinates, bounds, costs and the budget row."""

    def __init__(self, space, battery_duration=None):
        self.space = space
        n = space.size
        keep = np.ones(n, bool)
        P = np.eye(n)
        ub = space.upper.copy()
        if battery_duration is not None:
            ip, ie = space.index("es_p"), space.index("es_e")
            P[ie, ip] = battery_duration
            ub[ip] = np.minimum(ub[ip], ub[ie] / battery_duration)
            keep[ie] = False
        self.P = P[:, keep]
        self.lb = np.zeros(int(keep.sum()))
        self.ub = ub[keep]
        self.cost = self.P.T @ space.cost
        em_mask = np.zeros(n, bool)
        em_mask[space.slices["em"]] = True
        self.budget_row = em_mask[keep].astype(float)
        self.budget = space.budget

    @property
    def dim(self):
        return self.lb.size

    def to_x(self, z):
        return self.P @ z

    def midpoint(self):
        z = 0.5 * (self.lb + self.ub)
        if np.isfinite(self.budget) and self.budget_row @ z > self.budget:
            z[self.budget_row > 0] *= 0.5 * self.budget / max(self.budget_row @ z, 1e-300)
        return z

    def x_constraints(self):
        """Rows ``A z <= b`` of the polytope (box and budget)."""
        d = self.dim
        A = [-np.eye(d), np.eye(d)]
        b = [-self.lb, self.ub]
        if np.isfinite(self.budget) and self.budget_row.any():
            A.append(self.budget_row[None, :])
            b.append([self.budget])
        return np.vstack(A), np.concatenate(b)


@dataclass
class Cut:
    scenario: int
    theta: float
    g: np.ndarray
    anchor: np.ndarray

    def __call__(self, z):
        return self.theta + self.g @ (z - self.anchor)


def scenario_model(cuts, z):
    """Cutting-plane model at ``z``: max of the zero model and every cut."""
    return max([0.0] + [c(z) for c in cuts])


def model_value(master, cuts_by_scenario, weights, z):
    return float(master.cost @ z + sum(w * scenario_model(cs, z) for w, cs in zip(weights, cuts_by_scenario)))


def lower_bound(master, cuts_by_scenario, weights, config=None):
    """Minimize the cutting-plane model over the investment polytope."""
    bld = LPBuilder()
    z = bld.add_vars("z", master.dim, lb=master.lb, ub=master.ub, cost=master.cost)
    eta = bld.add_vars("eta", len(cuts_by_scenario), lb=0.0, cost=np.asarray(weights, float))
    for w, cuts in enumerate(cuts_by_scenario):
        for c in cuts:
            bld.add_row(np.append(z, eta[w]), np.append(c.g, -1.0), LE, c.g @ c.anchor - c.theta)
    if np.isfinite(master.budget) and master.budget_row.any():
        idx = np.flatnonzero(master.budget_row)
        bld.add_row(z[idx], 1.0, LE, master.budget)
    sol = solve_lp(bld.build(), config or SolverConfig())
    if not sol.ok:
        raise SolverFailure(f"master lower-bound LP ended with status {sol.status}: {sol.message}")
    return sol.objective, sol.x[z]


def analytic_center(A, b, v0=None, tol=1e-8, max_iter=100, scale=None, offset=None):
    """Maximizer of ``sum(log(b - A v))`` by damped Newton.

    ``scale``/``offset`` describe an affine change of variables
    ``v = offset + scale * u`` used only for conditioning; the center itself is
    invariant to it.  Raises :class:`EmptyInteriorError` when no strictly
    interior point exists.
    """
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    n = A.shape[1]
    scale = np.ones(n) if scale is None else np.asarray(scale, float)
    offset = np.zeros(n) if offset is None else np.asarray(offset, float)
    As = A * scale[None, :]
    bs = b - A @ offset
    norms = np.linalg.norm(As, axis=1)
    live = norms > 0
    if np.any(bs[~live] <= 0):
        raise EmptyInteriorError("constant constraint row is violated")
    As, bs = As[live] / norms[live, None], bs[live] / norms[live]

    u = None if v0 is None else (np.asarray(v0, float) - offset) / scale
    if u is None or np.any(bs - As @ u <= 0):
        u = _interior_point(As, bs)

    for _ in range(max_iter):
        s = bs - As @ u
        grad = As.T @ (1.0 / s)
        H = As.T @ ((1.0 / s**2)[:, None] * As)
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, grad, rcond=None)[0]
        decrement = -grad @ step
        if np.linalg.norm(grad) < tol or decrement < 1e-24:
            # already in the quadratic region: one full step polishes to machine precision
            if np.all(bs - As @ (u + step) > 0):
                u = u + step
            break
        ds = -As @ step
        neg = ds < 0
        t = 1.0
        if neg.any():
            t = min(1.0, 0.99 * np.min(-s[neg] / ds[neg]))
        phi = -np.sum(np.log(s))
        while t > 1e-14:
            s_new = s + t * ds
            if np.all(s_new > 0) and -np.sum(np.log(s_new)) <= phi - 0.25 * t * decrement:
                break
            t *= 0.5
        else:
            break
        u = u + t * step
    return offset + scale * u


def _interior_point(As, bs):
    """Phase I: maximize the smallest normalized slack."""
    m, n = As.shape
    bld = LPBuilder()
    u = bld.add_vars("u", n, lb=-np.inf)
    t = bld.add_vars("t", 1, lb=-np.inf, ub=1.0, cost=-1.0)
    for r in range(m):
        bld.add_row(np.append(u, t), np.append(As[r], 1.0), LE, bs[r])
    sol = solve_lp(bld.build())
    if not sol.ok or sol.x[t][0] <= 1e-10:
        raise EmptyInteriorError("level set has no strictly interior point")
    return sol.x[u]


def level_set_center(master, cuts_by_scenario, weights, theta_lev, z0=None):
    """Analytic center of ``{z in X : model(z) <= theta_lev}`` in ``z``.

    Components with a zero-width box are held at their bound.
    """
    A_x, b_x = master.x_constraints()
    free = master.ub > master.lb
    fixed_z = np.where(free, 0.0, master.lb)
    n_free = int(free.sum())
    if not np.isfinite(theta_lev) or not cuts_by_scenario:
        n_eta = 0
    else:
        n_eta = len(cuts_by_scenario)

    rows, rhs = [], []
    for a, bb in zip(A_x, b_x):
        af = a[free]
        if np.any(af != 0):
            rows.append(np.concatenate([af, np.zeros(n_eta)]))
            rhs.append(bb - a[~free] @ fixed_z[~free])
    if n_eta:
        for w, cuts in enumerate(cuts_by_scenario):
            e = np.zeros(n_eta)
            e[w] = -1.0
            rows.append(np.concatenate([np.zeros(n_free), e]))
            rhs.append(0.0)
            for c in cuts:
                rows.append(np.concatenate([c.g[free], e]))
                rhs.append(c.g @ c.anchor - c.theta - c.g[~free] @ fixed_z[~free])
    if np.isfinite(theta_lev):
        rows.append(np.concatenate([master.cost[free], np.asarray(weights, float)[:n_eta]]))
        rhs.append(theta_lev - master.cost[~free] @ fixed_z[~free])
    if n_free + n_eta == 0:
        return fixed_z
    A = np.array(rows).reshape(-1, n_free + n_eta)
    b = np.array(rhs)

    width = master.ub[free] - master.lb[free]
    eta_scale = max(1.0, abs(theta_lev)) if np.isfinite(theta_lev) else 1.0
    scale = np.concatenate([width, np.full(n_eta, eta_scale)])
    offset = np.concatenate([master.lb[free], np.zeros(n_eta)])
    v0 = None
    if z0 is not None and n_eta:
        v0 = np.concatenate([z0[free], [scenario_model(cs, z0) * 1.0 + 1.0 for cs in cuts_by_scenario]])
    v = analytic_center(A, b, v0=v0, scale=scale, offset=offset)
    z = fixed_z.copy()
    z[free] = v[:n_free]
    return z


@dataclass
class BundleResult:
    x: np.ndarray
    z: np.ndarray
    lower: float
    upper: float
    status: str
    trajectory: list
    incumbent: list
    contingency_sets: list
    cuts: list
    space: PortfolioSpace
    master: MasterSpace
    model: OperationsModel
    timings: dict = field(default_factory=dict)

    @property
    def gap(self):
        return relative_gap(self.lower, self.upper)

    @property
    def n_iter(self):
        return len(self.trajectory)


def relative_gap(L, U):
    if not np.isfinite(U):
        return np.inf
    if U <= 0:
        return 0.0 if U - L <= 1e-12 else np.inf
    return (U - L) / U


def run_bund(network, params, scenarios, directed_basis, mode="scdc", epsilon=1e-3, alpha=0.3,
             max_iter=500, n_jobs=1, config=None, x_hat_br=None, callback=None):
    """Solve the linearized expansion problem; returns a :class:`BundleResult`."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    config = config or SolverConfig()
    params.validate()
    for sc in scenarios:
        sc.validate(network)
    model = OperationsModel.build(network, params, directed_basis, mode, x_hat_br)
    space = PortfolioSpace(network, params, len(scenarios))
    master = MasterSpace(space, params.battery_duration)
    weights = np.array([sc.weight for sc in scenarios], float)
    n_scen = len(scenarios)

    cuts = [[] for _ in range(n_scen)]
    J = [frozenset() for _ in range(n_scen)]
    L_prev, U_prev = 0.0, np.inf
    gap_prev = np.inf
    z = master.midpoint()
    incumbent = None
    z_best = z.copy()
    trajectory = []
    timings = {"oracle": 0.0, "master": 0.0, "center": 0.0}
    status = "iteration_cap"
    pool = ThreadPoolExecutor(max_workers=n_jobs) if n_jobs and n_jobs > 1 else None

    def call(w):
        return oracle(model, space, master.to_x(z), scenarios[w], J[w], config, position=w)

    try:
        for k in range(1, max_iter + 1):
            t0 = time.perf_counter()
            results = list(pool.map(call, range(n_scen))) if pool else [call(w) for w in range(n_scen)]
            timings["oracle"] += time.perf_counter() - t0

            type2 = True
            for w, res in enumerate(results):
                prev = scenario_model(cuts[w], z)
                if res.theta > prev + TYPE2_TOL or res.sigma > 0:
                    type2 = False
                cuts[w].append(Cut(w, res.theta, master.P.T @ res.g, z.copy()))
                J[w] = J[w] | res.new_contingencies

            f_k = float(master.cost @ z + sum(wt * (r.theta + r.sigma) for wt, r in zip(weights, results)))
            t0 = time.perf_counter()
            L_lp, z_lb = lower_bound(master, cuts, weights, config)
            timings["master"] += time.perf_counter() - t0
            L = max(L_prev, L_lp)
            U = min(U_prev, f_k)
            if f_k <= U_prev + INCUMBENT_TIE:
                incumbent = results
                z_best = z.copy()
            gap = U - L
            rec = {
                "k": k, "L": L, "U": U, "f": f_k, "gap": relative_gap(L, U),
                "J_sizes": [len(s) for s in J], "type": "II" if type2 else "I",
                "sigma": [r.sigma for r in results],
            }
            if type2 and k > 1:
                rec["contraction_ok"] = bool(gap <= alpha * gap_prev + 1e-8)
            trajectory.append(rec)
            if callback:
                callback(rec)
            logger.info("bund k=%d L=%.6g U=%.6g gap=%.3g type=%s |J|=%s",
                        k, L, U, rec["gap"], rec["type"], rec["J_sizes"])
            if relative_gap(L, U) < epsilon:
                status = "converged"
                break

            theta_lev = L + alpha * (U - L)
            rec["theta_lev"] = theta_lev
            t0 = time.perf_counter()
            try:
                z_next = level_set_center(master, cuts, weights, theta_lev)
                rec["fallback"] = False
            except EmptyInteriorError:
                z_next = _fallback_iterate(master, cuts, weights, theta_lev, z_lb, z)
                rec["fallback"] = True
            timings["center"] += time.perf_counter() - t0
            rec["level_excess"] = model_value(master, cuts, weights, z_next) - theta_lev
            L_prev, U_prev, gap_prev = L, U, gap
            z = z_next
        else:
            logger.warning("bundle method hit the iteration cap (%d); returning best incumbent", max_iter)
    finally:
        if pool:
            pool.shutdown()

    return BundleResult(
        x=master.to_x(z_best), z=z_best, lower=trajectory[-1]["L"], upper=trajectory[-1]["U"],
        status=status, trajectory=trajectory, incumbent=incumbent, contingency_sets=J, cuts=cuts,
        space=space, master=master, model=model, timings=timings,
    )


def _fallback_iterate(master, cuts, weights, theta_lev, z_lb, z_k, lam=0.1):
    """Point between the model minimizer and the current iterate inside the level set."""
    while lam > 1e-12:
        z = z_lb + lam * (z_k - z_lb)
        if model_value(master, cuts, weights, z) < theta_lev:
            return z
        lam *= 0.5
    return z_lb.copy()


def incumbent_breakdown(result, scenarios, params):
    """Cost split of the incumbent; sums to the final upper bound."""
    inv = float(result.space.cost @ result.x)
    parts = np.zeros(5)
    for sc, res in zip(scenarios, result.incumbent):
        extra_mw = res.sigma / params.violation_cost
        parts += sc.weight * np.array(operating_breakdown(params, sc, res.y, extra_mw))
    return CostBreakdown(inv, *parts)


class BundlePlanner(BaseEstimator):
    """Capacity expansion planner fitted on a problem instance.

    Parameters mirror the command-line flags.  After ``fit`` the investment
    decision is in ``x_`` (flat) and ``portfolio_`` (by category), the final
    bounds in ``lower_bound_``/``upper_bound_`` and the per-iteration log in
    ``trajectory_``.
    """

    def __init__(self, mode="scdc", epsilon=1e-3, alpha=0.3, max_iter=500, n_jobs=1,
                 minimal_basis=True, solver_config=None):
        self.mode = mode
        self.epsilon = epsilon
        self.alpha = alpha
        self.max_iter = max_iter
        self.n_jobs = n_jobs
        self.minimal_basis = minimal_basis
        self.solver_config = solver_config

    def fit(self, instance, y=None):
        cfg = self.solver_config or SolverConfig()
        t0 = time.perf_counter()
        self.basis_ = MinimalCycleBasis(minimal=self.minimal_basis, solver_config=cfg).fit(instance.network)
        t_basis = time.perf_counter() - t0
        res = run_bund(instance.network, instance.params, instance.scenarios, self.basis_.directed_,
                       mode=self.mode, epsilon=self.epsilon, alpha=self.alpha,
                       max_iter=self.max_iter, n_jobs=self.n_jobs, config=cfg)
        res.timings["basis"] = t_basis
        self.result_ = res
        self.x_ = res.x
        self.portfolio_ = res.space.split(res.x)
        self.lower_bound_ = res.lower
        self.upper_bound_ = res.upper
        self.trajectory_ = res.trajectory
        self.status_ = res.status
        self.n_iter_ = res.n_iter
        self.dispatch_ = [r.y for r in res.incumbent]
        self.breakdown_ = incumbent_breakdown(res, instance.scenarios, instance.params)
        return self

    def evaluate(self, instance, mode="scdc"):
        """Cost of the fitted portfolio under full physics with impedance feedback."""
        check_is_fitted(self, "x_")
        bd, _ = evaluate_portfolio(instance.network, instance.params, self.basis_.directed_,
                                   instance.scenarios, self.x_, mode=mode,
                                   config=self.solver_config)
        return bd
