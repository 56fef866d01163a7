"""Restricted transmission re-optimization and the impedance-consistency loop.

With non-transmission decisions frozen, branch flows follow from the nodal
injections through PTDF/LODF at the impedance-defining capacities ``x_hat``.
What remains is a separable trade-off per branch between expansion cost and
post-contingency violation, solved in closed form by an order statistic.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cycles import fundamental_basis
from .network import lodf, non_islanding_set, non_slack, ptdf

logger = logging.getLogger(__name__)

BALANCE_TOL = 1e-6


def rth_largest(v, r):
    """``r``-th largest entry of ``v`` counting duplicates; 0 when ``r > len(v)``."""
    if r < 1:
        raise ValueError("r must be a positive integer")
    v = np.asarray(v, float).ravel()
    if r > v.size:
        return 0.0
    return float(np.partition(v, v.size - r)[v.size - r])


def weighted_rth_largest(v, weights, rho):
    """Largest breakpoint at which the weighted count of entries ``>=`` it reaches ``rho``.

    With unit weights and ``rho > 0`` this equals ``rth_largest(v, ceil(rho))``.
    """
    v = np.asarray(v, float).ravel()
    weights = np.broadcast_to(np.asarray(weights, float), v.shape)
    order = np.argsort(-v, kind="stable")
    cum = np.cumsum(weights[order])
    hit = np.flatnonzero(cum >= rho)
    return float(v[order[hit[0]]]) if hit.size else 0.0


def stationarity_holds(x, v, weights, rho, tol=1e-9):
    """Weighted count of ``v > x`` is at most ``rho``, which is at most the count of ``v >= x``."""
    v = np.asarray(v, float).ravel()
    weights = np.broadcast_to(np.asarray(weights, float), v.shape)
    above = weights[v > x + tol].sum()
    at_or_above = weights[v >= x - tol].sum()
    return bool(above <= rho + 1e-12 and rho <= at_or_above + 1e-12)


@dataclass
class ExpansionDetail:
    """Intermediate quantities of one evaluation of the restricted expansion map."""

    x_tilde: np.ndarray
    x_lb: np.ndarray
    x_opt: np.ndarray
    flows: np.ndarray
    delta_c: np.ndarray
    outages: np.ndarray


class RestrictedExpansion:
    """The map ``x_hat -> x_tilde`` for fixed nodal injections.

    ``injections`` is a list with one ``(T, n)`` array per scenario; each hour
    must sum to zero over buses.  ``weights`` scale each scenario's violation
    cost exactly as in the planning objective.
    """

    def __init__(self, network, params, injections, weights=None, outages=None):
        self.network = network
        self.params = params
        inj = [np.atleast_2d(np.asarray(p, float)) for p in injections]
        for w, p in enumerate(inj):
            if p.shape[1] != network.n_bus:
                raise ValueError(f"scenario {w}: injections must have {network.n_bus} columns")
            imbalance = np.abs(p.sum(axis=1)).max(initial=0.0)
            if imbalance > BALANCE_TOL * max(1.0, np.abs(p).max(initial=0.0)):
                raise ValueError(f"scenario {w}: nodal injections are unbalanced by {imbalance:.3g} MW")
        weights = np.ones(len(inj)) if weights is None else np.asarray(weights, float)
        if weights.shape != (len(inj),):
            raise ValueError("one weight per scenario is required")
        self.weights = weights
        self.row_weight = np.concatenate([np.full(p.shape[0], wt) for p, wt in zip(inj, weights)])
        self.injections = np.vstack(inj)[:, non_slack(network)] if inj else np.zeros((0, network.n_bus - 1))
        if outages is None:
            outages = non_islanding_set(fundamental_basis(network))
        self.outages = np.array(sorted(outages), dtype=int)
        self.w_br = network.branch_array("w_br")
        self.x_max = network.branch_array("x_br_max")
        self.c_br = network.branch_array("c_br")
        self.eta_c = params.contingency_rating
        self.c_vio = params.violation_cost

    @property
    def unit_weights(self):
        return bool(np.all(self.weights == 1.0))

    def ratio(self, i):
        return self.c_br[i] / (self.eta_c * self.c_vio)

    def breakpoints(self, delta_c, i):
        """Breakpoints of branch ``i`` and their weights, one per (hour, outage)."""
        keep = self.outages != i
        v = delta_c[:, i, keep] / self.eta_c
        w = np.repeat(self.row_weight, int(keep.sum()))
        return v.ravel(), w

    def detail(self, x_hat):
        x_hat = np.asarray(x_hat, float)
        if x_hat.shape != self.w_br.shape:
            raise ValueError(f"x_hat must have {self.w_br.size} entries")
        if np.any(x_hat < -1e-12) or np.any(x_hat > self.x_max + 1e-9):
            raise ValueError("x_hat lies outside [0, x_max]")
        x_hat = np.clip(x_hat, 0.0, self.x_max)
        phi = ptdf(self.network, x_hat)
        flows = self.injections @ phi.T
        b = self.w_br.size
        B = self.outages
        if B.size:
            lam = lodf(self.network, x_hat, B, phi=phi)[:, B]
            post = flows[:, :, None] + lam[None, :, :] * flows[:, None, B]
            delta_c = np.maximum(np.abs(post) - self.eta_c * self.w_br[None, :, None], 0.0)
        else:
            delta_c = np.zeros((flows.shape[0], b, 0))
        delta_base = np.maximum(np.abs(flows) - self.w_br[None, :], 0.0)
        x_lb = delta_base.max(axis=0, initial=0.0)
        x_opt = np.zeros(b)
        for i in range(b):
            v, w = self.breakpoints(delta_c, i)
            rho = self.ratio(i)
            if self.unit_weights:
                x_opt[i] = rth_largest(v, max(1, math.ceil(rho)))
            else:
                x_opt[i] = weighted_rth_largest(v, w, rho)
        x_tilde = np.minimum(np.maximum(x_lb, x_opt), self.x_max)
        return ExpansionDetail(x_tilde, x_lb, x_opt, flows, delta_c, B)

    def __call__(self, x_hat):
        return self.detail(x_hat).x_tilde

    def objective(self, x_br, detail):
        """Separable RTEP objective at ``x_br`` for flows fixed in ``detail``."""
        x_br = np.asarray(x_br, float)
        over = np.maximum(detail.delta_c - self.eta_c * x_br[None, :, None], 0.0)
        own = detail.outages[None, :] == np.arange(x_br.size)[:, None]
        over[:, own] = 0.0
        return float(self.c_br @ x_br + self.c_vio * np.einsum("k,kij->", self.row_weight, over))

    def violations(self, x_br, detail, threshold=1e-6):
        """``(row, i, j)`` triples whose post-contingency flow still exceeds the rating."""
        over = detail.delta_c - self.eta_c * np.asarray(x_br, float)[None, :, None]
        out = set()
        for k, i, jj in zip(*np.nonzero(over > threshold)):
            j = int(detail.outages[jj])
            if j != i:
                out.add((int(k), int(i), j))
        return out


@dataclass
class CorrResult:
    x_hat: np.ndarray
    residuals: list
    converged: bool
    iterations: int
    damping: float
    history: list = field(default_factory=list)


def corr_fixed_point(expansion, x_start, tol=1e-6, max_iter=200, damping=1.0, max_restarts=3):
    """Damped fixed-point iteration ``x <- (1 - lam) x + lam E(x)``.

    Stops once ``max|E(x) - x| < tol``.  If ``max_iter`` steps do not get there
    the damping is halved and the loop restarts from the last iterate, at most
    ``max_restarts`` times; then the best iterate seen is returned.
    """
    x = np.clip(np.asarray(x_start, float), 0.0, expansion.x_max)
    lam = float(damping)
    history = []
    best_res, best_x = np.inf, x.copy()
    for restart in range(max_restarts + 1):
        for _ in range(max_iter):
            e = expansion(x)
            res = float(np.max(np.abs(e - x), initial=0.0))
            history.append({"iteration": len(history) + 1, "residual": res, "damping": lam})
            if res < best_res:
                best_res, best_x = res, x.copy()
            if res < tol:
                return CorrResult(x, [h["residual"] for h in history], True, len(history), lam, history)
            x = (1.0 - lam) * x + lam * e
        if restart < max_restarts:
            lam *= 0.5
            logger.info("CORR not converged after %d steps; damping reduced to %g", max_iter, lam)
    logger.warning("CORR did not converge (best residual %.3g MW); returning best iterate", best_res)
    return CorrResult(best_x, [h["residual"] for h in history], False, len(history), lam, history)


class TransmissionCorrector(BaseEstimator, TransformerMixin):
    """Make branch capacities consistent with the impedances they imply.

    ``fit(instance, solution)`` freezes the nodal injections of ``solution``
    (which exposes ``x_br`` and ``injections``) and iterates the restricted
    expansion map from ``solution.x_br``.  ``transform(x_hat)`` applies the
    map once.
    """

    def __init__(self, tol=1e-6, max_iter=200, damping=1.0, max_restarts=3):
        self.tol = tol
        self.max_iter = max_iter
        self.damping = damping
        self.max_restarts = max_restarts

    def fit(self, instance, solution):
        weights = [sc.weight for sc in instance.scenarios]
        self.expansion_ = RestrictedExpansion(instance.network, instance.params,
                                              solution.injections, weights)
        res = corr_fixed_point(self.expansion_, solution.x_br, self.tol, self.max_iter,
                               self.damping, self.max_restarts)
        self.result_ = res
        self.x_hat_ = res.x_hat
        self.residuals_ = res.residuals
        self.converged_ = res.converged
        self.n_iter_ = res.iterations
        return self

    def transform(self, x_hat):
        check_is_fitted(self, "expansion_")
        return self.expansion_(x_hat)


def restricted_expansion_map(x_hat, injections, network, params, weights=None):
    """One application of the restricted expansion map."""
    return RestrictedExpansion(network, params, injections, weights)(x_hat)
