import numpy as np
import pytest

from gridexpand.cycles import MinimalCycleBasis
from gridexpand.network import Bus, Generator, Load, Network
from gridexpand.solver import EQ
from gridexpand.subproblem import (
    OperationsModel,
    PortfolioSpace,
    Scenario,
    TechParams,
    build_subproblem,
    evaluate_portfolio,
    extensive_form,
    oracle,
    screen_contingencies,
    subproblem_value,
)


def setup(inst, mode="scdc", x_hat=None):
    D = MinimalCycleBasis().fit(inst.network).directed_
    model = OperationsModel.build(inst.network, inst.params, D, mode, x_hat)
    space = PortfolioSpace(inst.network, inst.params, len(inst.scenarios))
    return model, space


def random_portfolio(rng, space):
    x = rng.uniform(0, 1, space.size) * space.upper
    em = space.slices["em"]
    if np.isfinite(space.budget):
        x[em] = rng.dirichlet(np.ones(space.n_scenarios)) * space.budget * rng.uniform(0, 1)
    return x


def test_complete_recourse(triangle):
    rng = np.random.default_rng(0)
    model, space = setup(triangle)
    for _ in range(100):
        x = random_portfolio(rng, space)
        w = int(rng.integers(0, 2))
        J = [c for c in model.full_contingency_set(triangle.T) if rng.random() < 0.3]
        res = oracle(model, space, x, triangle.scenarios[w], frozenset(J), position=w)
        assert np.isfinite(res.theta)


def test_subgradient_matches_finite_differences(triangle):
    rng = np.random.default_rng(1)
    model, space = setup(triangle)
    sc = triangle.scenarios[0]
    x = random_portfolio(rng, space)
    J = oracle(model, space, x, sc).new_contingencies
    res = oracle(model, space, x, sc, J)
    for k in range(space.size):
        e = np.zeros(space.size)
        e[k] = 1e-3
        if x[k] < 1e-3 or x[k] + 1e-3 > space.upper[k]:
            continue
        fd = (oracle(model, space, x + e, sc, J).theta - oracle(model, space, x - e, sc, J).theta) / 2e-3
        assert res.g[k] == pytest.approx(fd, rel=1e-4, abs=1e-3)


def test_oracle_sandwich_and_cut_validity(five_bus):
    rng = np.random.default_rng(2)
    model, space = setup(five_bus)
    for _ in range(5):
        x = random_portfolio(rng, space)
        z = random_portfolio(rng, space)
        for w, sc in enumerate(five_bus.scenarios):
            J = frozenset(c for c in model.full_contingency_set(sc.T) if rng.random() < 0.2)
            res = oracle(model, space, x, sc, J, position=w)
            full_x = subproblem_value(model, space, x, sc, position=w)[0]
            full_z = subproblem_value(model, space, z, sc, position=w)[0]
            tol = 1e-6 * max(1.0, abs(full_x))
            assert res.theta <= full_x + tol
            assert full_x <= res.theta + res.sigma + tol
            assert res.theta + res.g @ (z - x) <= full_z + 1e-6 * max(1.0, abs(full_z))


def test_cycle_and_angle_kvl_agree(six_bus):
    rng = np.random.default_rng(3)
    model, space = setup(six_bus)
    for _ in range(3):
        x = random_portfolio(rng, space)
        sc = six_bus.scenarios[0]
        J = frozenset(c for c in model.full_contingency_set(sc.T) if rng.random() < 0.2)
        a = oracle(model, space, x, sc, J, kvl="cycle").theta
        b = oracle(model, space, x, sc, J, kvl="angle").theta
        assert a == pytest.approx(b, rel=1e-6)


def test_modes_change_structure(triangle):
    rng = np.random.default_rng(4)
    x = random_portfolio(rng, PortfolioSpace(triangle.network, triangle.params, 2))
    sc = triangle.scenarios[0]
    values = {}
    for mode in ("nf", "dc", "dc07", "scdc"):
        model, space = setup(triangle, mode)
        sub = build_subproblem(model, space, x, sc)
        kvl_rows = int(np.sum(sub.lp.senses == EQ))
        values[mode] = (subproblem_value(model, space, x, sc)[0], kvl_rows)
        if mode != "scdc":
            assert model.full_contingency_set(sc.T) == frozenset()
    # KVL adds one equality per cycle and hour
    assert values["dc"][1] - values["nf"][1] == sc.T
    # tighter physics can only cost more
    assert values["nf"][0] <= values["dc"][0] + 1e-6
    assert values["dc"][0] <= values["dc07"][0] + 1e-6
    assert values["dc"][0] <= values["scdc"][0] + 1e-6


def test_nf_mode_rejects_contingencies(triangle):
    model, space = setup(triangle, "nf")
    with pytest.raises(ValueError):
        oracle(model, space, np.zeros(space.size), triangle.scenarios[0], frozenset({(0, 0, 1)}))


def test_screening_threshold_and_self_outage(triangle):
    model, _ = setup(triangle)
    w = triangle.network.branch_array("w_br")
    eta = triangle.params.contingency_rating
    # branch 0 carries a flow that overloads the others when it trips
    p = np.array([[eta * w[0] * 0.9, 0.0, 0.0]])
    s_hat, sigma, new = screen_contingencies(p, model, np.zeros(3))
    assert all(i != j for (_, i, j) in new)
    assert sigma == pytest.approx(triangle.params.violation_cost * sum(s_hat.values()))
    tiny = np.array([[1e-9, 0.0, 0.0]])
    assert screen_contingencies(tiny, model, np.zeros(3))[2] == frozenset()


def test_emission_subgradient_sign(triangle):
    # allowing more emissions can only lower the operating cost
    rng = np.random.default_rng(5)
    model, space = setup(triangle)
    x = random_portfolio(rng, space)
    res = oracle(model, space, x, triangle.scenarios[0])
    assert res.g[space.index("em")[0]] <= 1e-9


def test_single_bus_merit_order():
    net = Network([Bus(0, True)], [], generators=[Generator(0, 0, 50.0), Generator(1, 0, 100.0)],
                  loads=[Load(0, 0)])
    prm = TechParams()
    sc = Scenario("a", [[10.0, 30.0], [10.0, 30.0]], np.ones((2, 2)), [[40.0], [120.0]])
    model = OperationsModel.build(net, prm, np.zeros((0, 0)), "scdc")
    space = PortfolioSpace(net, prm, 1)
    value = subproblem_value(model, space, np.zeros(space.size), sc)[0]
    assert value == pytest.approx(40 * 10 + 50 * 10 + 70 * 30)


def test_extensive_form_fixed_x_equals_scenario_sum(five_bus):
    rng = np.random.default_rng(6)
    model, space = setup(five_bus)
    x = random_portfolio(rng, space)
    total = space.cost @ x + sum(sc.weight * subproblem_value(model, space, x, sc, position=w)[0]
                                 for w, sc in enumerate(five_bus.scenarios))
    ef = extensive_form(model, space, five_bus.scenarios, fixed_x=x)[0]
    assert ef == pytest.approx(total, rel=1e-7)
    bd, _ = evaluate_portfolio(five_bus.network, five_bus.params, model.directed_basis, five_bus.scenarios, x,
                               impedance_feedback=False)
    assert bd.total == pytest.approx(ef, rel=1e-7)


def test_extensive_form_battery_coupling(triangle):
    params = TechParams(**{**triangle.params.__dict__, "battery_duration": 4.0})
    D = MinimalCycleBasis().fit(triangle.network).directed_
    model = OperationsModel.build(triangle.network, params, D)
    space = PortfolioSpace(triangle.network, params, 2)
    _, x, _ = extensive_form(model, space, triangle.scenarios)
    assert x[space.slices["es_e"]] == pytest.approx(4.0 * x[space.slices["es_p"]])


def test_portfolio_validation(triangle):
    model, space = setup(triangle)
    with pytest.raises(ValueError):
        oracle(model, space, np.zeros(space.size + 1), triangle.scenarios[0])
    with pytest.raises(ValueError):
        oracle(model, space, np.zeros(space.size), triangle.scenarios[0], frozenset({(99, 0, 1)}))
