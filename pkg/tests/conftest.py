import numpy as np
import pytest

from gridexpand.instance import load_bundled
from gridexpand.network import Branch, Bus, Network

ACCEPTANCE_LINES = []


def random_connected_edges(rng, n, extra):
    """Random spanning tree plus ``extra`` distinct non-tree edges (simple graph)."""
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    present = {frozenset(e) for e in edges}
    pool = [(u, v) for u in range(n) for v in range(u + 1, n) if frozenset((u, v)) not in present]
    rng.shuffle(pool)
    return edges + [tuple(e) for e in pool[:extra]]


def random_network(rng, n, extra, **devices):
    edges = random_connected_edges(rng, n, extra)
    branches = [Branch(j, u, v, float(rng.uniform(0.01, 0.3)), float(rng.uniform(50, 500)),
                       float(rng.uniform(20, 200)), float(rng.uniform(1, 30)))
                for j, (u, v) in enumerate(edges)]
    return Network([Bus(i, i == 0) for i in range(n)], branches, **devices)


def dc_flows(network, injections, x_br=None, drop=None):
    """Branch flows from an angle solve of the DC equations (independent of PTDF code)."""
    keep = [j for j in range(network.n_branch) if j != drop]
    x = np.array([br.x0 for br in network.branches])
    if x_br is not None:
        w = np.array([br.w_br for br in network.branches])
        x = x * w / (w + np.asarray(x_br))
    n = network.n_bus
    lap = np.zeros((n, n))
    for j in keep:
        br = network.branches[j]
        s = 1.0 / x[j]
        u, v = br.from_bus, br.to_bus
        lap[u, u] += s
        lap[v, v] += s
        lap[u, v] -= s
        lap[v, u] -= s
    # nodal balance reads A_br @ p_br = p_ni, so p_br = (theta_to - theta_from) / x
    idx = [i for i in range(n) if i != network.slack_bus]
    theta = np.zeros(n)
    theta[idx] = np.linalg.solve(lap[np.ix_(idx, idx)], np.asarray(injections, float)[idx])
    flows = np.zeros(network.n_branch)
    for j in keep:
        br = network.branches[j]
        flows[j] = (theta[br.to_bus] - theta[br.from_bus]) / x[j]
    return flows


@pytest.fixture(scope="session")
def triangle():
    return load_bundled("triangle3")


@pytest.fixture(scope="session")
def five_bus():
    return load_bundled("five_bus")


@pytest.fixture(scope="session")
def six_bus():
    return load_bundled("six_bus")


@pytest.fixture
def record_criterion():
    def record(number, passed, detail):
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
