import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import dc_flows, random_network
from gridexpand.cycles import fundamental_basis
from gridexpand.network import (
    Branch,
    Bus,
    IslandingError,
    Network,
    NetworkStructureError,
    impedance,
    impedances,
    incidence_matrix,
    lodf,
    non_islanding_set,
    non_slack,
    ptdf,
    sensitivities,
)


def triangle_net(x0=0.1):
    return Network.from_edges(3, [(0, 1), (1, 2), (0, 2)], x0=x0, w_br=100.0)


def test_impedance_examples():
    br = Branch(0, 0, 1, 0.1, 100.0)
    assert impedance(br, 0.0) == pytest.approx(0.1)
    assert impedance(br, 100.0) == pytest.approx(0.05)
    assert impedance(br, 300.0) == pytest.approx(0.025)


def test_impedance_rejects_negative_expansion():
    with pytest.raises(ValueError):
        impedance(Branch(0, 0, 1, 0.1, 100.0), -1.0)


@given(st.floats(0.01, 1.0), st.floats(1.0, 1e3), st.floats(0.0, 1e4), st.floats(0.0, 1e4))
def test_impedance_decreasing_and_parallel_law(x0, w, a, b):
    br = Branch(0, 0, 1, x0, w)
    lo, hi = sorted((a, b))
    assert impedance(br, hi) <= impedance(br, lo) + 1e-15
    # two copies of the same circuit in parallel halve the impedance
    assert impedance(br, w) == pytest.approx(x0 / 2)


def test_zero_capacity_branch_rejected():
    with pytest.raises(NetworkStructureError, match="zero base capacity"):
        Network.from_edges(2, [(0, 1)], w_br=0.0)


def test_disconnected_network_rejected():
    with pytest.raises(NetworkStructureError, match="not connected"):
        Network.from_edges(4, [(0, 1), (2, 3)])


def test_duplicate_bus_id_named():
    with pytest.raises(NetworkStructureError, match=r"\[1\]"):
        Network([Bus(0, True), Bus(1), Bus(1)], [Branch(0, 0, 1, 0.1, 10.0)])


def test_self_loop_rejected():
    with pytest.raises(NetworkStructureError, match="self-loop"):
        Network.from_edges(2, [(0, 1), (1, 1)])


def test_incidence_shapes_and_signs():
    net = triangle_net()
    A_full, A = incidence_matrix(net)
    assert A_full.shape == (3, 3) and A.shape == (3, 2)
    assert A_full[0].tolist() == [-1, 1, 0]
    assert np.allclose(A_full.sum(axis=1), 0)


def test_ptdf_matches_angle_solve():
    rng = np.random.default_rng(0)
    for _ in range(10):
        net = random_network(rng, int(rng.integers(3, 9)), int(rng.integers(0, 5)))
        x_br = rng.uniform(0, 100, net.n_branch)
        p = rng.normal(size=net.n_bus)
        p -= p.mean()
        phi = ptdf(net, x_br)
        assert phi.shape == (net.n_branch, net.n_bus - 1)
        assert np.allclose(phi @ p[non_slack(net)], dc_flows(net, p, x_br), atol=1e-10)


def test_ptdf_flows_satisfy_nodal_balance():
    net = triangle_net()
    p = np.array([-30.0, 10.0, 20.0])
    flows = ptdf(net) @ p[1:]
    assert np.allclose(net.branch_incidence @ flows, p)


def test_triangle_lodf_is_unit_rerouting():
    # removing one side of an equal-impedance triangle sends the whole flow around the other two
    net = triangle_net()
    lam = lodf(net)
    off = lam[~np.eye(3, dtype=bool)]
    assert np.allclose(np.abs(off), 1.0)
    assert np.allclose(np.diag(lam), -1.0)
    p = np.array([-30.0, 10.0, 20.0])
    flows = ptdf(net) @ p[1:]
    for j in range(3):
        post = flows + lam[:, j] * flows[j]
        assert np.allclose(post, dc_flows(net, p, drop=j), atol=1e-10)


def test_lodf_matches_outage_resolve():
    rng = np.random.default_rng(1)
    for _ in range(8):
        net = random_network(rng, int(rng.integers(3, 10)), int(rng.integers(1, 6)))
        x_br = rng.uniform(0, 50, net.n_branch)
        B = non_islanding_set(fundamental_basis(net))
        lam = lodf(net, x_br, B)
        p = rng.normal(size=net.n_bus)
        p -= p.mean()
        flows = dc_flows(net, p, x_br)
        for j in B:
            post = flows + lam[:, j] * flows[j]
            assert np.allclose(post, dc_flows(net, p, x_br, drop=j), atol=1e-9)


def test_non_islanding_set_is_complement_of_bridges():
    rng = np.random.default_rng(2)
    for _ in range(20):
        net = random_network(rng, int(rng.integers(2, 10)), int(rng.integers(0, 5)))
        g = nx.Graph()
        g.add_edges_from(net.edges)
        bridges = {frozenset(e) for e in nx.bridges(g)}
        expected = tuple(j for j, e in enumerate(net.edges) if frozenset(e) not in bridges)
        assert non_islanding_set(fundamental_basis(net)) == expected


def test_bridge_outage_raises_islanding_error():
    net = Network.from_edges(4, [(0, 1), (1, 2), (0, 2), (2, 3)])
    with pytest.raises(IslandingError, match=r"\[3\]"):
        lodf(net, non_islanding=[3])


def test_lodf_marks_uncomputed_columns_nan():
    net = Network.from_edges(4, [(0, 1), (1, 2), (0, 2), (2, 3)])
    lam = lodf(net, non_islanding=non_islanding_set(fundamental_basis(net)))
    assert np.all(np.isnan(lam[:, 3]))
    assert np.all(np.isfinite(lam[:, :3]))


def test_sensitivities_are_read_only():
    net = triangle_net()
    sens = sensitivities(net, None, (0, 1, 2))
    with pytest.raises(ValueError):
        sens.ptdf[0, 0] = 1.0


def test_impedances_follow_expansion():
    net = triangle_net()
    assert np.allclose(impedances(net, [0.0, 100.0, 300.0]), [0.1, 0.05, 0.025])
    with pytest.raises(ValueError):
        impedances(net, [0.0, -1.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 8), st.integers(0, 4), st.integers(0, 10_000))
def test_post_outage_flows_keep_nodal_balance(n, extra, seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n, extra)
    B = non_islanding_set(fundamental_basis(net))
    lam = lodf(net, None, B)
    p = rng.normal(size=n)
    p -= p.mean()
    flows = ptdf(net) @ p[1:]
    A = net.branch_incidence
    for j in B:
        post = flows + lam[:, j] * flows[j]
        assert abs(post[j]) < 1e-9
        assert np.allclose(A @ post, p, atol=1e-8)
