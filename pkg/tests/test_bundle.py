import logging

import numpy as np
import pytest
from scipy.optimize import brentq
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gridexpand.bundle import (
    BundlePlanner,
    Cut,
    EmptyInteriorError,
    MasterSpace,
    analytic_center,
    incumbent_breakdown,
    level_set_center,
    lower_bound,
    model_value,
    run_bund,
)
from gridexpand.cycles import MinimalCycleBasis
from gridexpand.instance import Instance
from gridexpand.network import Bus, Generator, Load, Network
from gridexpand.subproblem import (
    OperationsModel,
    PortfolioSpace,
    Scenario,
    TechParams,
    extensive_form,
    subproblem_value,
)


class Box:
    """Minimal stand-in for a master space over a plain box."""

    def __init__(self, ub, cost=None):
        self.lb = np.zeros(len(ub))
        self.ub = np.asarray(ub, float)
        self.cost = np.zeros(len(ub)) if cost is None else np.asarray(cost, float)
        self.budget_row = np.zeros(len(ub))
        self.budget = np.inf

    @property
    def dim(self):
        return self.lb.size

    x_constraints = MasterSpace.x_constraints


@pytest.fixture(scope="module")
def triangle_run(triangle):
    D = MinimalCycleBasis().fit(triangle.network).directed_
    return run_bund(triangle.network, triangle.params, triangle.scenarios, D, epsilon=1e-4)


def test_box_midpoint_center():
    box = Box([1.0, 1.0, 1.0])
    assert np.allclose(level_set_center(box, [], [], np.inf), 0.5, atol=1e-8)
    box = Box([2.0, 6.0])
    assert np.allclose(level_set_center(box, [[]], [1.0], np.inf), [1.0, 3.0], atol=1e-8)


def test_center_with_level_row_matches_root_finder():
    A = np.array([[-1, 0], [0, -1], [1, 0], [0, 1], [1, 1]], float)
    b = np.array([0, 0, 2, 2, 2], float)
    s = brentq(lambda s: 1 / s - 1 / (2 - s) - 1 / (2 - 2 * s), 1e-9, 1 - 1e-9)
    assert analytic_center(A, b) == pytest.approx([s, s], abs=1e-8)
    # the same point reached through the level-set interface
    box = Box([2.0, 2.0], cost=[1.0, 1.0])
    assert level_set_center(box, [], [], 2.0) == pytest.approx([s, s], abs=1e-8)


def test_redundant_level_equals_box_center():
    box = Box([1.0, 3.0], cost=[1.0, 1.0])
    assert level_set_center(box, [], [], 1e9) == pytest.approx([0.5, 1.5], abs=1e-6)


def test_empty_interior_raises():
    A = np.array([[1.0], [-1.0]])
    with pytest.raises(EmptyInteriorError):
        analytic_center(A, np.array([1.0, -1.0]))


def test_center_is_scale_invariant():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(8, 3))
    b = A @ rng.uniform(size=3) + rng.uniform(0.1, 1, 8)
    A = np.vstack([A, np.eye(3), -np.eye(3)])
    b = np.concatenate([b, np.full(3, 5.0), np.full(3, 5.0)])
    v1 = analytic_center(A, b)
    v2 = analytic_center(A, b, scale=np.array([10.0, 0.1, 3.0]), offset=np.array([1.0, 0.0, -1.0]))
    assert v1 == pytest.approx(v2, abs=1e-7)
    s = b - A @ v1
    assert np.linalg.norm(A.T @ (1 / s)) < 1e-6


def test_lower_bound_zero_cuts():
    box = Box([1.0, 2.0], cost=[3.0, 1.0])
    L, z = lower_bound(box, [[]], [1.0])
    assert L == pytest.approx(0.0)
    assert z == pytest.approx([0.0, 0.0])


def test_lower_bound_single_flat_cut():
    box = Box([1.0, 2.0], cost=[3.0, 1.0])
    L, _ = lower_bound(box, [[Cut(0, 5.0, np.zeros(2), np.zeros(2))]], [1.0])
    assert L == pytest.approx(5.0)


def test_lower_bound_v_shape_matches_grid():
    box = Box([4.0], cost=[0.5])
    cuts = [[Cut(0, 3.0, np.array([-2.0]), np.array([0.0])), Cut(0, 1.0, np.array([1.5]), np.array([3.0]))]]
    L, z = lower_bound(box, cuts, [1.0])
    grid = np.linspace(0, 4, 400_001)
    vals = 0.5 * grid + np.maximum(0, np.maximum(3 - 2 * grid, 1 + 1.5 * (grid - 3)))
    assert L == pytest.approx(vals.min(), abs=1e-6)
    assert model_value(box, cuts, [1.0], z) == pytest.approx(L, abs=1e-9)


def test_run_matches_extensive_form(triangle, triangle_run):
    res = triangle_run
    D = MinimalCycleBasis().fit(triangle.network).directed_
    model = OperationsModel.build(triangle.network, triangle.params, D)
    space = PortfolioSpace(triangle.network, triangle.params, 2)
    ef = extensive_form(model, space, triangle.scenarios)[0]
    assert res.status == "converged"
    assert res.lower <= ef * (1 + 1e-7)
    assert abs(res.upper - ef) <= 1e-4 * res.upper


def test_run_invariants(triangle_run):
    traj = triangle_run.trajectory
    for prev, cur in zip(traj, traj[1:]):
        assert cur["L"] >= prev["L"] - 1e-9
        assert cur["U"] <= prev["U"] + 1e-9
        assert all(a >= b for a, b in zip(cur["J_sizes"], prev["J_sizes"]))
        if cur["type"] == "II":
            assert cur["contraction_ok"]
    for rec in traj[:-1]:
        assert rec["level_excess"] <= 1e-7
    assert traj[-1]["gap"] < 1e-4


def test_cuts_minorize_full_value(triangle, triangle_run):
    res = triangle_run
    rng = np.random.default_rng(7)
    for _ in range(20):
        z = res.master.lb + rng.uniform(size=res.master.dim) * (res.master.ub - res.master.lb)
        x = res.master.to_x(z)
        for w, sc in enumerate(triangle.scenarios):
            full = subproblem_value(res.model, res.space, x, sc, position=w)[0]
            for cut in res.cuts[w]:
                assert cut(z) <= full + 1e-6 * max(1.0, abs(full))


def test_upper_bound_is_cost_when_no_violations(triangle, triangle_run):
    res = triangle_run
    bd = incumbent_breakdown(res, triangle.scenarios, triangle.params)
    assert bd.total == pytest.approx(res.upper, rel=1e-9)
    full = res.space.cost @ res.x + sum(
        sc.weight * subproblem_value(res.model, res.space, res.x, sc, position=w)[0]
        for w, sc in enumerate(triangle.scenarios))
    if all(r.sigma == 0 for r in res.incumbent):
        assert full == pytest.approx(res.upper, rel=1e-7)
    else:
        assert full <= res.upper * (1 + 1e-9)


def test_loose_epsilon_stops_at_first_qualifying_iteration(triangle):
    D = MinimalCycleBasis().fit(triangle.network).directed_
    res = run_bund(triangle.network, triangle.params, triangle.scenarios, D, epsilon=0.5)
    gaps = [r["gap"] for r in res.trajectory]
    assert gaps[-1] < 0.5
    assert all(g >= 0.5 for g in gaps[:-1])


def test_single_bus_converges_fast():
    net = Network([Bus(0, True)], [], generators=[Generator(0, 0, 50.0), Generator(1, 0, 100.0)],
                  loads=[Load(0, 0)])
    sc = Scenario("a", [[10.0, 30.0], [10.0, 30.0]], np.ones((2, 2)), [[40.0], [120.0]])
    res = run_bund(net, TechParams(), [sc], np.zeros((0, 0)))
    assert res.n_iter <= 3
    assert res.upper == pytest.approx(40 * 10 + 50 * 10 + 70 * 30)


def test_parallel_oracles_reproduce_serial(triangle):
    D = MinimalCycleBasis().fit(triangle.network).directed_
    a = run_bund(triangle.network, triangle.params, triangle.scenarios, D, n_jobs=1)
    b = run_bund(triangle.network, triangle.params, triangle.scenarios, D, n_jobs=2)
    assert [r["U"] for r in a.trajectory] == pytest.approx([r["U"] for r in b.trajectory])


def test_iteration_cap_warns(triangle, caplog):
    D = MinimalCycleBasis().fit(triangle.network).directed_
    with caplog.at_level(logging.WARNING):
        res = run_bund(triangle.network, triangle.params, triangle.scenarios, D, epsilon=1e-9, max_iter=2)
    assert res.status == "iteration_cap"
    assert res.n_iter == 2
    assert "iteration cap" in caplog.text


def test_battery_duration_coupling(triangle):
    params = TechParams(**{**triangle.params.__dict__, "battery_duration": 4.0})
    inst = Instance(triangle.network, params, triangle.scenarios)
    pl = BundlePlanner(epsilon=1e-3).fit(inst)
    assert pl.portfolio_.x_es_e == pytest.approx(4.0 * pl.portfolio_.x_es_p)


def test_invalid_parameters(triangle):
    D = MinimalCycleBasis().fit(triangle.network).directed_
    with pytest.raises(ValueError):
        run_bund(triangle.network, triangle.params, triangle.scenarios, D, epsilon=0.0)
    with pytest.raises(ValueError):
        run_bund(triangle.network, triangle.params, triangle.scenarios, D, alpha=1.0)


def test_planner_estimator(triangle):
    pl = BundlePlanner(epsilon=1e-2)
    assert clone(pl).get_params()["epsilon"] == 1e-2
    with pytest.raises(NotFittedError):
        pl.evaluate(triangle)
    pl.fit(triangle)
    assert pl.lower_bound_ <= pl.upper_bound_
    assert pl.breakdown_.total == pytest.approx(pl.upper_bound_, rel=1e-6)
    assert len(pl.dispatch_) == 2
    assert pl.evaluate(triangle).total > 0
