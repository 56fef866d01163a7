"""Thin boundary around the HiGHS LP/MIP engines shipped with scipy.

Every optimization in the package goes through :func:`solve_lp` or
:func:`solve_ip`.  Problems are assembled with :class:`LPBuilder`, which keeps
named variable blocks and row groups so callers can pull duals back out by tag.

Dual values are reported as sensitivities of the optimal objective with
respect to the row right-hand side, so for a minimization a ``<=`` row has a
nonpositive dual and a ``>=`` row a nonnegative one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

logger = logging.getLogger(__name__)

LE, EQ, GE = "<", "=", ">"

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
FAILED = "failed"


class SolverFailure(RuntimeError):
    """Raised when an engine does not return a usable optimal solution."""


@dataclass
class SolverConfig:
    time_limit_s: float | None = None
    feas_tol: float = 1e-7
    opt_tol: float = 1e-7

    @classmethod
    def from_mapping(cls, cfg):
        """Build from a ``{"solver": {...}}`` or flat ``solver.*`` mapping."""
        if cfg is None:
            return cls()
        if "solver" in cfg and isinstance(cfg["solver"], dict):
            cfg = cfg["solver"]
        else:
            cfg = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("solver.")}
        known = {"time_limit_s", "feas_tol", "opt_tol"}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown solver config keys: {sorted(unknown)}")
        return cls(**cfg)


@dataclass
class LinearProgram:
    """``min c'x`` subject to ``A x (sense) rhs`` and ``lb <= x <= ub``."""

    c: np.ndarray
    A: sp.csr_matrix
    senses: np.ndarray
    rhs: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integrality: np.ndarray | None = None
    var_blocks: dict = field(default_factory=dict)
    row_blocks: dict = field(default_factory=dict)
    objective_offset: float = 0.0

    @property
    def n_vars(self):
        return self.c.shape[0]

    @property
    def n_rows(self):
        return self.A.shape[0]

    def check(self):
        n, m = self.n_vars, self.n_rows
        if self.A.shape != (m, n) or self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("inconsistent LP dimensions")
        if self.rhs.shape != (m,) or self.senses.shape != (m,):
            raise ValueError("inconsistent LP row data")
        if not set(np.unique(self.senses)) <= {LE, EQ, GE}:
            raise ValueError("row senses must be one of '<', '=', '>'")
        if np.any(self.lb > self.ub):
            raise ValueError("variable lower bound exceeds upper bound")


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None = None
    duals: np.ndarray | None = None
    objective: float = float("nan")
    dual_objective: float = float("nan")
    message: str = ""

    @property
    def ok(self):
        return self.status == OPTIMAL


class LPBuilder:
    """Incremental assembly of a sparse LP from named blocks."""

    def __init__(self):
        self._lb, self._ub, self._c, self._int = [], [], [], []
        self._n = 0
        self._rows, self._cols, self._vals = [], [], []
        self._senses, self._rhs = [], []
        self._m = 0
        self.var_blocks = {}
        self.row_blocks = {}

    def add_vars(self, name, shape, lb=0.0, ub=np.inf, cost=0.0, integer=False):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        idx = np.arange(self._n, self._n + size).reshape(shape)
        self._lb.append(np.broadcast_to(np.asarray(lb, float), shape).ravel())
        self._ub.append(np.broadcast_to(np.asarray(ub, float), shape).ravel())
        self._c.append(np.broadcast_to(np.asarray(cost, float), shape).ravel())
        self._int.append(np.full(size, 1 if integer else 0))
        self._n += size
        if name in self.var_blocks:
            raise ValueError(f"duplicate variable block {name!r}")
        self.var_blocks[name] = idx
        return idx

    def add_row(self, cols, vals, sense, rhs, group=None):
        """Add one row; returns its index."""
        cols = np.asarray(cols, dtype=int).ravel()
        vals = np.broadcast_to(np.asarray(vals, float), cols.shape).ravel()
        r = self._m
        self._rows.append(np.full(cols.shape, r))
        self._cols.append(cols)
        self._vals.append(vals)
        self._senses.append(sense)
        self._rhs.append(float(rhs))
        self._m += 1
        if group is not None:
            self.row_blocks.setdefault(group, []).append(r)
        return r

    def build(self, objective_offset=0.0):
        n, m = self._n, self._m
        if self._rows:
            rows = np.concatenate(self._rows)
            cols = np.concatenate(self._cols)
            vals = np.concatenate(self._vals)
        else:
            rows = cols = np.zeros(0, int)
            vals = np.zeros(0)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
        cat = lambda parts, dt=float: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt)
        integrality = cat(self._int, int)
        lp = LinearProgram(
            c=cat(self._c),
            A=A,
            senses=np.array(self._senses, dtype="<U1") if m else np.zeros(0, "<U1"),
            rhs=np.array(self._rhs, float),
            lb=cat(self._lb),
            ub=cat(self._ub),
            integrality=integrality if integrality.any() else None,
            var_blocks=dict(self.var_blocks),
            row_blocks={k: np.array(v, int) for k, v in self.row_blocks.items()},
            objective_offset=objective_offset,
        )
        lp.check()
        return lp


def _split_rows(lp):
    le = lp.senses == LE
    ge = lp.senses == GE
    eq = lp.senses == EQ
    ub_rows = np.flatnonzero(le | ge)
    sign = np.where(ge[ub_rows], -1.0, 1.0)
    A_ub = sp.diags(sign) @ lp.A[ub_rows] if ub_rows.size else None
    b_ub = sign * lp.rhs[ub_rows] if ub_rows.size else None
    eq_rows = np.flatnonzero(eq)
    A_eq = lp.A[eq_rows] if eq_rows.size else None
    b_eq = lp.rhs[eq_rows] if eq_rows.size else None
    return ub_rows, sign, A_ub, b_ub, eq_rows, A_eq, b_eq


def _status_from_code(code):
    return {0: OPTIMAL, 2: INFEASIBLE, 3: UNBOUNDED}.get(code, FAILED)


def solve_lp(lp, config=None):
    """Solve an LP with HiGHS; duals are mandatory on success."""
    config = config or SolverConfig()
    lp.check()
    ub_rows, sign, A_ub, b_ub, eq_rows, A_eq, b_eq = _split_rows(lp)
    options = {
        "primal_feasibility_tolerance": config.feas_tol,
        "dual_feasibility_tolerance": config.opt_tol,
    }
    if config.time_limit_s is not None:
        options["time_limit"] = float(config.time_limit_s)
    try:
        res = linprog(
            lp.c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
            bounds=np.column_stack([lp.lb, lp.ub]), method="highs", options=options,
        )
    except Exception as exc:  # noqa: BLE001
        logger.warning("LP engine raised: %s", exc)
        return LpSolution(FAILED, message=str(exc))
    status = _status_from_code(res.status)
    if status != OPTIMAL:
        return LpSolution(status, message=res.message)

    duals = np.zeros(lp.n_rows)
    if ub_rows.size:
        duals[ub_rows] = sign * res.ineqlin.marginals
    if eq_rows.size:
        duals[eq_rows] = res.eqlin.marginals
    lo_mu = np.asarray(res.lower.marginals)
    up_mu = np.asarray(res.upper.marginals)
    finite_lb = np.isfinite(lp.lb)
    finite_ub = np.isfinite(lp.ub)
    dual_obj = (
        duals @ lp.rhs
        + lo_mu[finite_lb] @ lp.lb[finite_lb]
        + up_mu[finite_ub] @ lp.ub[finite_ub]
    )
    return LpSolution(
        OPTIMAL,
        x=np.asarray(res.x),
        duals=duals,
        objective=float(res.fun) + lp.objective_offset,
        dual_objective=float(dual_obj) + lp.objective_offset,
        message=res.message,
    )


def solve_ip(lp, config=None):
    """Solve a mixed-integer program to proven optimality (primal only)."""
    config = config or SolverConfig()
    lp.check()
    integrality = lp.integrality if lp.integrality is not None else np.zeros(lp.n_vars, int)
    lo = np.where(lp.senses == GE, lp.rhs, -np.inf)
    hi = np.where(lp.senses == LE, lp.rhs, np.inf)
    eq = lp.senses == EQ
    lo[eq] = lp.rhs[eq]
    hi[eq] = lp.rhs[eq]
    constraints = [LinearConstraint(lp.A, lo, hi)] if lp.n_rows else []
    options = {"mip_rel_gap": 0.0}
    if config.time_limit_s is not None:
        options["time_limit"] = float(config.time_limit_s)
    try:
        res = milp(lp.c, integrality=integrality, bounds=Bounds(lp.lb, lp.ub),
                   constraints=constraints, options=options)
    except Exception as exc:  # noqa: BLE001
        logger.warning("MIP engine raised: %s", exc)
        return LpSolution(FAILED, message=str(exc))
    # milp reports time-limit (1) separately; anything but 0/2/3 is a failure
    status = _status_from_code(res.status)
    if status != OPTIMAL:
        return LpSolution(status, message=res.message)
    return LpSolution(OPTIMAL, x=np.asarray(res.x),
                      objective=float(res.fun) + lp.objective_offset, message=res.message)


def primal_residual(lp, x):
    """Largest violation of rows and bounds at ``x``."""
    ax = lp.A @ x
    viol = np.zeros(lp.n_rows)
    le, ge, eq = lp.senses == LE, lp.senses == GE, lp.senses == EQ
    viol[le] = np.maximum(ax[le] - lp.rhs[le], 0)
    viol[ge] = np.maximum(lp.rhs[ge] - ax[ge], 0)
    viol[eq] = np.abs(ax[eq] - lp.rhs[eq])
    bound = np.maximum(np.maximum(lp.lb - x, 0), np.maximum(x - lp.ub, 0))
    return float(max(viol.max(initial=0.0), bound.max(initial=0.0)))
