"""Instance files, test-instance generation, run configuration and reports.

An instance is a network JSON file plus a scenario manifest CSV
(``id,weight,file``) pointing at one CSV per scenario.  Scenario CSVs have an
``hour`` column followed by ``cost_g<k>``, ``avail_g<k>`` and ``load_d<k>``
columns.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .network import Branch, Bus, Generator, HvdcLine, Load, Network, NetworkStructureError, Storage
from .solver import SolverConfig
from .subproblem import MODES, Scenario, TechParams

NETWORK_FILE = "network.json"
MANIFEST_FILE = "scenarios.csv"
BUNDLED = ("triangle3", "five_bus", "six_bus")


class InstanceError(ValueError):
    """Invalid instance file; the message names the file and the offending item."""


@dataclass
class Instance:
    network: Network
    params: TechParams
    scenarios: list
    name: str = "instance"

    @property
    def T(self):
        return self.scenarios[0].T if self.scenarios else 0

    def validate(self):
        self.network.validate()
        self.params.validate()
        for sc in self.scenarios:
            sc.validate(self.network)
        if len({sc.id for sc in self.scenarios}) != len(self.scenarios):
            raise InstanceError("scenario ids must be unique")

    def reserve_shortfall(self):
        """Largest hourly gap between required reserve and what existing units can hold.

        A positive value means some portfolios make the operational LP
        infeasible, because reserves have no slack variable.
        """
        net, gam = self.network, self.params.reserve_margin
        if gam <= 0:
            return 0.0
        wg = np.array([g.capacity for g in net.generators], float)
        es = sum(min(s.power, s.soc_ratio * s.energy) for s in net.storage)
        worst = 0.0
        for sc in self.scenarios:
            avail = sc.availability @ wg if wg.size else np.zeros(sc.T)
            worst = max(worst, float(np.max(gam * sc.load.sum(axis=1) - avail - es)))
        return worst


# -- serialization -----------------------------------------------------------

def _bus_from(d):
    return Bus(int(d["id"]), bool(d.get("slack", False)))


def _branch_from(d):
    return Branch(int(d["id"]), int(d["from"]), int(d["to"]), float(d["x0"]), float(d["w_br"]),
                  float(d.get("x_br_max", 0.0)), float(d.get("c_br", 0.0)))


def _hvdc_from(d):
    return HvdcLine(int(d["id"]), int(d["from"]), int(d["to"]), float(d["capacity"]))


def _gen_from(d):
    return Generator(int(d["id"]), int(d["bus"]), float(d["capacity"]), float(d.get("x_max", 0.0)),
                     float(d.get("invest_cost", 0.0)), float(d.get("ramp", 1.0)),
                     float(d.get("emission", 0.0)))


def _storage_from(d):
    return Storage(int(d["id"]), int(d["bus"]), float(d["power"]), float(d["energy"]),
                   float(d.get("x_power_max", 0.0)), float(d.get("x_energy_max", 0.0)),
                   float(d.get("power_cost", 0.0)), float(d.get("energy_cost", 0.0)),
                   float(d.get("efficiency", 1.0)), float(d.get("soc_ratio", 0.5)))


def _load_from(d):
    return Load(int(d["id"]), int(d["bus"]))


def _params_from(d):
    d = dict(d or {})
    unknown = set(d) - set(TechParams.__dataclass_fields__)
    if unknown:
        raise InstanceError(f"unknown params keys: {sorted(unknown)}")
    return TechParams(**d)


def network_to_dict(network):
    return {
        "slack_bus": network.slack_bus,
        "buses": [{"id": b.id, "slack": b.is_slack} for b in network.buses],
        "branches": [{"id": br.id, "from": br.from_bus, "to": br.to_bus, "x0": br.x0, "w_br": br.w_br,
                      "x_br_max": br.x_br_max, "c_br": br.c_br} for br in network.branches],
        "hvdc": [{"id": dc.id, "from": dc.from_bus, "to": dc.to_bus, "capacity": dc.capacity}
                 for dc in network.hvdc],
        "generators": [asdict(g) for g in network.generators],
        "storage": [asdict(s) for s in network.storage],
        "loads": [asdict(ld) for ld in network.loads],
    }


def network_from_dict(d, source="<network>"):
    try:
        buses = [_bus_from(b) for b in d["buses"]]
        ids = [b.id for b in buses]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise InstanceError(f"{source}: duplicate bus id {dup[0]}")
        return Network(
            buses,
            [_branch_from(b) for b in d.get("branches", [])],
            [_hvdc_from(h) for h in d.get("hvdc", [])],
            [_gen_from(g) for g in d.get("generators", [])],
            [_storage_from(s) for s in d.get("storage", [])],
            [_load_from(ld) for ld in d.get("loads", [])],
            slack_bus=int(d.get("slack_bus", 0)),
        )
    except KeyError as exc:
        raise InstanceError(f"{source}: missing field {exc.args[0]!r}") from exc
    except NetworkStructureError as exc:
        raise InstanceError(f"{source}: {exc}") from exc


def _params_to_dict(params):
    d = asdict(params)
    if not math.isfinite(d["emission_budget"]):
        d.pop("emission_budget")
    return d


def scenario_columns(n_gen, n_load):
    return (["hour"] + [f"cost_g{k}" for k in range(n_gen)] + [f"avail_g{k}" for k in range(n_gen)]
            + [f"load_d{k}" for k in range(n_load)])


def write_scenario_csv(path, scenario):
    G, D = scenario.gen_cost.shape[1], scenario.load.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(scenario_columns(G, D))
        for t in range(scenario.T):
            row = [t] + [repr(float(v)) for v in scenario.gen_cost[t]]
            row += [repr(float(v)) for v in scenario.availability[t]]
            row += [repr(float(v)) for v in scenario.load[t]]
            w.writerow(row)


def read_scenario_csv(path, sid, weight, n_gen, n_load):
    path = Path(path)
    if not path.is_file():
        raise InstanceError(f"scenario {sid}: file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InstanceError(f"{path}: empty scenario file")
    header, body = rows[0], rows[1:]
    expected = scenario_columns(n_gen, n_load)
    if header != expected:
        raise InstanceError(f"{path}: expected columns {expected}, got {header}")
    try:
        data = np.array([[float(v) for v in r] for r in body], float).reshape(len(body), len(expected))
    except ValueError as exc:
        raise InstanceError(f"{path}: {exc}") from exc
    if not np.array_equal(data[:, 0], np.arange(len(body))):
        raise InstanceError(f"{path}: hours must run 0..T-1 in order")
    G = n_gen
    return Scenario(sid, data[:, 1:1 + G], data[:, 1 + G:1 + 2 * G], data[:, 1 + 2 * G:], weight)


def write_instance(instance, directory):
    """Write ``network.json``, the manifest and one CSV per scenario."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"name": instance.name, **network_to_dict(instance.network),
           "params": _params_to_dict(instance.params), "manifest": MANIFEST_FILE}
    (directory / NETWORK_FILE).write_text(json.dumps(doc, indent=2) + "\n")
    with open(directory / MANIFEST_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "weight", "file"])
        for sc in instance.scenarios:
            fname = f"scenario_{sc.id}.csv"
            w.writerow([sc.id, repr(float(sc.weight)), fname])
            write_scenario_csv(directory / fname, sc)
    return directory


def _resolve(path):
    path = Path(path)
    if not path.exists() and str(path) in BUNDLED:
        return bundled_path(str(path))
    if path.is_dir():
        path = path / NETWORK_FILE
    return path


def bundled_path(name):
    if name not in BUNDLED:
        raise InstanceError(f"no bundled instance named {name!r}; choose from {BUNDLED}")
    return Path(str(resources.files("gridexpand") / "data" / name / NETWORK_FILE))


def load_instance(path, manifest=None):
    """Load and validate an instance from a network JSON, its directory, or a bundled name."""
    net_path = _resolve(path)
    if not net_path.is_file():
        raise InstanceError(f"network file not found: {net_path}")
    try:
        doc = json.loads(net_path.read_text())
    except json.JSONDecodeError as exc:
        raise InstanceError(f"{net_path}: invalid JSON ({exc})") from exc
    network = network_from_dict(doc, str(net_path))
    try:
        params = _params_from(doc.get("params"))
        params.validate()
    except (TypeError, ValueError) as exc:
        raise InstanceError(f"{net_path}: params: {exc}") from exc
    man_path = Path(manifest) if manifest else net_path.parent / doc.get("manifest", MANIFEST_FILE)
    if not man_path.is_file():
        raise InstanceError(f"scenario manifest not found: {man_path}")
    scenarios = []
    with open(man_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "weight", "file"} <= set(reader.fieldnames):
            raise InstanceError(f"{man_path}: manifest needs columns id, weight, file")
        for line, rec in enumerate(reader, start=2):
            try:
                weight = float(rec["weight"])
            except ValueError as exc:
                raise InstanceError(f"{man_path}:{line}: bad weight {rec['weight']!r}") from exc
            sc = read_scenario_csv(man_path.parent / rec["file"], rec["id"], weight,
                                   len(network.generators), len(network.loads))
            try:
                sc.validate(network)
            except ValueError as exc:
                raise InstanceError(f"{man_path.parent / rec['file']}: {exc}") from exc
            scenarios.append(sc)
    if not scenarios:
        raise InstanceError(f"{man_path}: no scenarios listed")
    inst = Instance(network, params, scenarios, doc.get("name", net_path.parent.name))
    try:
        inst.validate()
    except ValueError as exc:
        raise InstanceError(f"{net_path}: {exc}") from exc
    return inst


def load_bundled(name):
    return load_instance(bundled_path(name))


# -- generation --------------------------------------------------------------

def _random_edges(rng, n, b):
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    present = {frozenset(e) for e in edges}
    candidates = [(u, v) for u in range(n) for v in range(u + 1, n) if frozenset((u, v)) not in present]
    rng.shuffle(candidates)
    extra = b - len(edges)
    edges += candidates[:extra]
    while len(edges) < b:
        u, v = sorted(rng.choice(n, 2, replace=False).tolist())
        edges.append((u, v))
    return edges


def generate_test_instance(n, b=None, n_scenarios=2, T=6, seed=0, name=None):
    """Random connected instance with reserves coverable by existing units.

    ``b`` defaults to ``n + n // 2`` branches (a single branch when ``n == 2``).
    """
    if n < 2:
        raise ValueError("need at least two buses")
    if b is None:
        b = 1 if n == 2 else n + n // 2
    if b < n - 1:
        raise ValueError("a connected graph on n buses needs at least n - 1 branches")
    rng = np.random.default_rng(seed)
    edges = _random_edges(rng, n, b)
    branches = []
    for j, (u, v) in enumerate(edges):
        w = float(np.round(rng.uniform(50, 500), 3))
        branches.append(Branch(j, u, v, float(np.round(rng.uniform(0.01, 0.3), 4)), w,
                               float(np.round(w * rng.uniform(0.5, 1.5), 3)),
                               float(np.round(rng.uniform(2, 30), 3))))

    gens, buses_with_gen = [], rng.permutation(n)[: max(2, (2 * n) // 3)]
    for k, bus in enumerate(sorted(buses_with_gen.tolist())):
        fossil = k % 2 == 0
        gens.append(Generator(
            k, bus, float(np.round(rng.uniform(50, 300), 3)), float(np.round(rng.uniform(100, 400), 3)),
            float(np.round(rng.uniform(60, 200) if fossil else rng.uniform(30, 120), 3)),
            float(np.round(rng.uniform(0.3, 1.0), 3)) if fossil else 1.0,
            float(np.round(rng.uniform(0.4, 1.0), 3)) if fossil else 0.0,
        ))
    storage = []
    for k, bus in enumerate(sorted(rng.choice(n, max(1, n // 3), replace=False).tolist())):
        p = float(np.round(rng.uniform(10, 60), 3))
        storage.append(Storage(k, bus, p, 4 * p, 200.0, 800.0,
                               float(np.round(rng.uniform(10, 40), 3)), float(np.round(rng.uniform(2, 10), 3)),
                               0.9, 0.5))
    load_buses = sorted(rng.choice(n, max(1, n // 2 + 1), replace=False).tolist())
    loads = [Load(k, bus) for k, bus in enumerate(load_buses)]
    hvdc = []
    if n >= 4:
        u, v = sorted(rng.choice(n, 2, replace=False).tolist())
        hvdc.append(HvdcLine(0, u, v, float(np.round(rng.uniform(20, 100), 3))))

    network = Network([Bus(i, i == 0) for i in range(n)], branches, hvdc, gens, storage, loads, 0)
    wg = np.array([g.capacity for g in gens])
    fossil = np.array([g.emission > 0 for g in gens])
    reserve_margin = 0.1
    scenarios = []
    for w in range(n_scenarios):
        hours = np.arange(T)
        shape = 0.75 + 0.25 * np.sin(2 * np.pi * (hours + w) / max(T, 1))
        base = rng.uniform(0.5, 1.0, len(loads))
        load = np.outer(shape, base)
        load *= 0.9 * wg.sum() / load.sum(axis=1).max()
        avail = np.where(fossil[None, :], 1.0, rng.uniform(0.1, 0.9, (T, len(gens))))
        cost = np.where(fossil[None, :], rng.uniform(20, 60, (T, len(gens))), 0.0)
        scenarios.append(Scenario(f"s{w}", np.round(cost, 3), np.round(avail, 3), np.round(load, 3),
                                  1.0))
    peak = max(sc.load.sum(axis=1).max() for sc in scenarios)
    fossil_cap = wg[fossil].sum()
    # keep the reserve requirement within reach of always-available fossil units
    reserve_margin = min(reserve_margin, 0.5 * fossil_cap / peak)
    emis = np.array([g.emission for g in gens])
    budget = 0.6 * sum(float(sc.load.sum()) for sc in scenarios) * float(emis[fossil].mean())
    params = TechParams(reserve_margin=float(np.round(reserve_margin, 4)), contingency_rating=1.2,
                        shed_cost=10_000.0, violation_cost=2_000.0,
                        emission_budget=float(np.round(budget, 3)))
    return Instance(network, params, scenarios, name or f"gen_n{n}_b{b}_s{seed}")


# -- configuration and reports -------------------------------------------------

@dataclass
class RunConfig:
    mode: str = "scdc"
    epsilon: float = 1e-3
    alpha: float = 0.3
    max_iters: int = 500
    threads: int = 1
    seed: int = 0
    corr_tol: float = 1e-6
    corr_max_iters: int = 200
    solver: SolverConfig = field(default_factory=SolverConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.max_iters < 1 or self.threads < 1:
            raise ValueError("max_iters and threads must be positive")
        return self

    @classmethod
    def from_mapping(cls, cfg):
        cfg = dict(cfg or {})
        solver = SolverConfig.from_mapping({k: v for k, v in cfg.items() if k == "solver" or k.startswith("solver.")})
        rest = {k: v for k, v in cfg.items() if k != "solver" and not k.startswith("solver.")}
        unknown = set(rest) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(solver=solver, **rest).validate()

    @classmethod
    def from_file(cls, path):
        return cls.from_mapping(json.loads(Path(path).read_text()))


def capacity_totals(network, portfolio):
    """New-build capacity by category in GW (GWh for storage energy)."""
    return {
        "generation_gw": float(np.sum(portfolio.x_g)) / 1e3,
        "storage_gw": float(np.sum(portfolio.x_es_p)) / 1e3,
        "storage_gwh": float(np.sum(portfolio.x_es_e)) / 1e3,
        "branch_gw": float(np.sum(portfolio.x_br)) / 1e3,
    }


@dataclass
class RunReport:
    instance: str
    mode: str
    status: str
    lower: float
    upper: float
    costs: dict
    capacity: dict
    trajectory: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def kvl_enabled(self):
        return self.mode != "nf"

    def to_dict(self):
        cols = {key: [rec.get(key) for rec in self.trajectory] for key in ("k", "L", "U", "gap")}
        return {
            "instance": self.instance,
            "mode": self.mode,
            "kvl_enabled": self.kvl_enabled,
            "status": self.status,
            "lower_bound": self.lower,
            "upper_bound": self.upper,
            "costs": self.costs,
            "capacity": self.capacity,
            "trajectory_columns": cols,
            "extra": self.extra,
            "timings": self.timings,
        }

    def summary(self):
        c = self.costs
        lines = [
            f"instance {self.instance}  mode {self.mode}  status {self.status}",
            f"KVL constraints: {'enabled' if self.kvl_enabled else 'disabled'}",
        ]
        if self.trajectory:
            lines.append(f"bounds L={self.lower:.6g} U={self.upper:.6g} iterations={len(self.trajectory)}")
        lines += [
            f"total cost        {c['total']:.6g}",
            f"  investment      {c['investment']:.6g}",
            f"  operating       {c['operating']:.6g}",
            f"  shed penalty    {c['shed_penalty']:.6g}",
            f"  violation pen.  {c['violation_penalty']:.6g}",
            f"Shed GWh {c['shed_gwh']:.6g}   Viol. GWh {c['viol_gwh']:.6g}",
            "new capacity: " + ", ".join(f"{k} {v:.4g}" for k, v in self.capacity.items()),
        ]
        return "\n".join(lines)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def emit_report(report, path=None):
    """Write the JSON report to ``path`` (if given) and return the human summary."""
    if path is not None:
        Path(path).write_text(json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True) + "\n")
    return report.summary()


def write_trajectory(trajectory, path):
    with open(path, "w") as fh:
        for rec in trajectory:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")


# -- saved planning solutions ----------------------------------------------------

@dataclass
class PlanSolution:
    """Portfolio plus the frozen nodal injections needed by the correction step."""

    x: np.ndarray
    x_br: np.ndarray
    injections: list
    mode: str = "scdc"
    lower: float = float("nan")
    upper: float = float("nan")

    def save(self, path):
        doc = {"x": self.x, "x_br": self.x_br, "injections": self.injections, "mode": self.mode,
               "lower_bound": self.lower, "upper_bound": self.upper}
        Path(path).write_text(json.dumps(_jsonable(doc)) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise InstanceError(f"solution file not found: {path}")
        try:
            doc = json.loads(path.read_text())
            return cls(np.array(doc["x"], float), np.array(doc["x_br"], float),
                       [np.array(p, float) for p in doc["injections"]], doc.get("mode", "scdc"),
                       float(doc.get("lower_bound", "nan")), float(doc.get("upper_bound", "nan")))
        except (KeyError, ValueError, TypeError) as exc:
            raise InstanceError(f"{path}: malformed solution file ({exc})") from exc

    @classmethod
    def from_planner(cls, planner):
        return cls(planner.x_, planner.portfolio_.x_br, [y.p_ni for y in planner.dispatch_],
                   planner.mode, planner.lower_bound_, planner.upper_bound_)
