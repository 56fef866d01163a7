"""Command-line entry point: ``gridexpand <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 iteration cap.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from .bundle import BundlePlanner
from .correction import TransmissionCorrector
from .cycles import MinimalCycleBasis
from .instance import (
    InstanceError,
    PlanSolution,
    RunConfig,
    RunReport,
    capacity_totals,
    emit_report,
    generate_test_instance,
    load_instance,
    write_instance,
    write_trajectory,
)
from .network import NetworkStructureError
from .solver import SolverFailure
from .subproblem import PortfolioSpace, evaluate_portfolio

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_CAP = 0, 2, 3, 4

logger = logging.getLogger("gridexpand")


def _config(args):
    cfg = json.loads(open(args.config).read()) if getattr(args, "config", None) else {}
    overrides = {
        "mode": getattr(args, "mode", None),
        "epsilon": getattr(args, "epsilon", None),
        "alpha": getattr(args, "alpha", None),
        "max_iters": getattr(args, "max_iters", None),
        "threads": getattr(args, "threads", None),
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_mapping(cfg)


def _load(args):
    inst = load_instance(args.instance, getattr(args, "manifest", None))
    if getattr(args, "battery_duration", None) is not None:
        inst.params.battery_duration = args.battery_duration
        inst.params.validate()
    return inst


def cmd_solve(args):
    cfg = _config(args)
    inst = _load(args)
    planner = BundlePlanner(mode=cfg.mode, epsilon=cfg.epsilon, alpha=cfg.alpha, max_iter=cfg.max_iters,
                            n_jobs=cfg.threads, solver_config=cfg.solver).fit(inst)
    report = RunReport(inst.name, cfg.mode, planner.status_, planner.lower_bound_, planner.upper_bound_,
                       planner.breakdown_.as_dict(), capacity_totals(inst.network, planner.portfolio_),
                       planner.trajectory_, planner.result_.timings)
    print(emit_report(report, args.report))
    if args.trajectory:
        write_trajectory(planner.trajectory_, args.trajectory)
    if args.solution:
        PlanSolution.from_planner(planner).save(args.solution)
    return EXIT_CAP if planner.status_ == "iteration_cap" else EXIT_OK


def cmd_evaluate(args):
    cfg = _config(args)
    inst = _load(args)
    sol = PlanSolution.load(args.solution)
    space = PortfolioSpace(inst.network, inst.params, len(inst.scenarios))
    if sol.x.shape != (space.size,):
        raise InstanceError(f"{args.solution}: portfolio length {sol.x.size} does not match instance ({space.size})")
    x = sol.x.copy()
    if args.use_corrected:
        x[space.slices["br"]] = sol.x_br
    t0 = time.perf_counter()
    D = MinimalCycleBasis(solver_config=cfg.solver).fit(inst.network).directed_
    bd, _ = evaluate_portfolio(inst.network, inst.params, D, inst.scenarios, x, mode=cfg.mode,
                               impedance_feedback=not args.no_feedback, config=cfg.solver)
    report = RunReport(inst.name, cfg.mode, "evaluated", float("nan"), bd.total, bd.as_dict(),
                       capacity_totals(inst.network, space.split(x)),
                       timings={"evaluate": time.perf_counter() - t0})
    print(emit_report(report, args.report))
    return EXIT_OK


def cmd_corr(args):
    inst = _load(args)
    sol = PlanSolution.load(args.solution)
    corr = TransmissionCorrector(tol=args.tol, max_iter=args.max_iters).fit(inst, sol)
    for h in corr.result_.history:
        print(f"iter {h['iteration']:4d}  residual {h['residual']:.6e}  damping {h['damping']:g}")
    print("branch  x_br_bund  x_hat_final")
    for j, (a, b) in enumerate(zip(sol.x_br, corr.x_hat_)):
        print(f"{j:6d}  {a:10.4f}  {b:11.4f}")
    print("converged" if corr.converged_ else "not converged (best iterate returned)")
    if args.output:
        PlanSolution(sol.x, corr.x_hat_, sol.injections, sol.mode, sol.lower, sol.upper).save(args.output)
    return EXIT_OK if corr.converged_ else EXIT_CAP


def cmd_mcb(args):
    inst = _load(args)
    est = MinimalCycleBasis(minimal=not args.fundamental).fit(inst.network)
    summary = est.summary()
    if args.json:
        print(json.dumps(summary))
    else:
        print(f"cycles {summary['n_cycles']}  total length {summary['total_length']}  "
              f"longest {summary['longest']}  (fundamental total {summary['fundamental_total_length']})")
        for k, cyc in enumerate(summary["cycles"]):
            print(f"  cycle {k}: branches {cyc}")
    return EXIT_OK


def cmd_gen(args):
    inst = generate_test_instance(args.buses, args.branches, args.scenarios, args.hours, args.seed)
    write_instance(inst, args.output)
    print(f"wrote {inst.name} to {args.output}")
    return EXIT_OK


def cmd_validate(args):
    inst = _load(args)
    net = inst.network
    print(f"{inst.name}: {net.n_bus} buses, {net.n_branch} branches, {len(net.hvdc)} hvdc, "
          f"{len(net.generators)} generators, {len(net.storage)} storage, {len(net.loads)} loads, "
          f"{len(inst.scenarios)} scenarios x {inst.T} hours, cycle space dim {net.n_branch - net.n_bus + 1}")
    short = inst.reserve_shortfall()
    if short > 1e-9:
        print(f"warning: existing capacity misses the reserve requirement by {short:.3f} MW; "
              "some portfolios will be infeasible")
    print("valid")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gridexpand", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def instance_args(sp):
        sp.add_argument("instance", help="network JSON, its directory, or a bundled instance name")
        sp.add_argument("--manifest", help="scenario manifest CSV (default: from the network file)")
        sp.add_argument("--battery-duration", type=float, help="tie storage energy to power (hours)")

    def run_args(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--mode", choices=["nf", "dc", "dc07", "scdc"])

    s = sub.add_parser("solve", help="run the bundle planner")
    instance_args(s)
    run_args(s)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--max-iters", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--trajectory", help="write per-iteration records as JSON lines")
    s.add_argument("--solution", help="write the portfolio and injections here")
    s.add_argument("--report", help="write the JSON report here")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("evaluate", help="cost of a saved portfolio under full physics")
    instance_args(s)
    run_args(s)
    s.add_argument("--solution", required=True)
    s.add_argument("--no-feedback", action="store_true", help="keep base impedances")
    s.add_argument("--use-corrected", action="store_true",
                   help="use the solution's corrected branch capacities")
    s.add_argument("--report")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("corr", help="impedance-consistency correction of a saved solution")
    instance_args(s)
    s.add_argument("--solution", required=True)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iters", type=int, default=200)
    s.add_argument("--output", help="write the corrected solution here")
    s.set_defaults(func=cmd_corr)

    s = sub.add_parser("mcb", help="minimal cycle basis of the branch graph")
    instance_args(s)
    s.add_argument("--fundamental", action="store_true", help="skip the exchange step")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_mcb)

    s = sub.add_parser("gen-instance", help="write a random test instance")
    s.add_argument("output")
    s.add_argument("--buses", type=int, default=6)
    s.add_argument("--branches", type=int)
    s.add_argument("--scenarios", type=int, default=2)
    s.add_argument("--hours", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("validate", help="load and check an instance")
    instance_args(s)
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.set_printoptions(precision=6, suppress=True)
    try:
        return args.func(args)
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InstanceError, NetworkStructureError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
