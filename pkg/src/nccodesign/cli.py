"""Command-line entry point: ``nccodesign {schedule,sweep,simulate,frontier}``.

Data goes to files and standard output; diagnostics go to standard error.
Exit codes: 0 on success, 2 for usage errors and missing input files,
1 for validation or solver failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import SCHEMA_VERSION, __version__
from .codesign import energy_frontier, sweep, write_frontier_csv, write_sweep_csv
from .discretize import discretize
from .lqg import riccati_control
from .model import ConfigError, DesignConfig, load_design, load_plant, load_topology
from .netdp import solve_constrained, unconstrained_policy, write_policy_json
from .simulate import simulate_closed_loop, write_report_csv, write_report_json

log = logging.getLogger("nccodesign")


class _MissingFile(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise _MissingFile(path)
    return p


def _threads(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _float_list(text: str) -> list:
    out = []
    for tok in text.replace(";", ",").split(","):
        tok = tok.strip()
        if tok:
            out.append(math.inf if tok.lower() in ("inf", "infinity") else float(tok))
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _with_overrides(cfg: DesignConfig, args) -> DesignConfig:
    seed = cfg.rng_seed if args.seed is None else args.seed
    reps = cfg.mc_replicates if args.replicates is None else args.replicates
    return DesignConfig(cfg.horizon_s, cfg.epsilon, cfg.h_grid, cfg.tau_grid, cfg.source_node,
                        reps, seed)


def cmd_schedule(args) -> int:
    topo = load_topology(_existing(args.topology))
    source = args.source or topo.source
    if args.unconstrained:
        policy = unconstrained_policy(topo, source, args.deadline_slots)
    else:
        policy = solve_constrained(topo, source, args.deadline_slots, args.c_req)
    write_policy_json(policy, args.out)
    print(json.dumps(policy.summary()))
    return 0


def cmd_sweep(args) -> int:
    plant = load_plant(_existing(args.plant))
    topo = load_topology(_existing(args.topology))
    cfg = _with_overrides(load_design(_existing(args.design), topo.slot_ms), args)
    points = sweep(plant, topo, cfg, simulate=args.simulate, mode=args.mode,
                   threads=args.threads)
    write_sweep_csv(points, args.out)
    log.info("wrote %d design points to %s", len(points), args.out)
    return 0


def cmd_simulate(args) -> int:
    plant = load_plant(_existing(args.plant))
    topo = load_topology(_existing(args.topology))
    tau = args.h_ms if args.tau_ms is None else args.tau_ms
    source = args.source or topo.source
    d = int(math.floor(tau / topo.slot_ms + 1e-9))
    if args.rho is not None:
        policy = args.rho
        if args.mode == "slot":
            raise ConfigError("--rho is only meaningful with --mode bernoulli")
    elif args.c_req is not None:
        policy = solve_constrained(topo, source, d, args.c_req)
    else:
        policy = unconstrained_policy(topo, source, d)
    dp = discretize(plant, args.h_ms / 1000.0, tau / 1000.0, args.horizon_s)
    gains = riccati_control(dp, finite_horizon=True)
    mode = "slot-level" if args.mode == "slot" else "bernoulli"
    report = simulate_closed_loop(plant, dp, gains, policy, topo, replicates=args.replicates,
                                  seed=args.seed, mode=mode, trajectory=not args.no_trajectory,
                                  source=source)
    write_report_json(report, args.out)
    if args.csv:
        write_report_csv(report, args.csv, per_replicate=args.per_replicate)
    return 0


def cmd_frontier(args) -> int:
    plant = load_plant(_existing(args.plant))
    topo = load_topology(_existing(args.topology))
    cfg = _with_overrides(load_design(_existing(args.design), topo.slot_ms), args)
    rows, _ = energy_frontier(plant, topo, cfg, args.epsilon_grid, threads=args.threads)
    write_frontier_csv(rows, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nccodesign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"nccodesign {__version__} (schema {SCHEMA_VERSION})")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="optimal forwarding policy for one deadline")
    p.add_argument("topology")
    p.add_argument("--deadline-slots", type=int, required=True)
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--c-req", type=float)
    grp.add_argument("--unconstrained", action="store_true")
    p.add_argument("--source", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_schedule)

    def shared(p):
        p.add_argument("plant")
        p.add_argument("topology")
        p.add_argument("design")
        p.add_argument("--out", required=True)
        p.add_argument("--threads", type=_threads, default=None,
                       help="worker processes (default: all cores)")
        p.add_argument("--seed", type=int)
        p.add_argument("--replicates", type=int)

    p = sub.add_parser("sweep", help="bounds (and optionally Monte Carlo) over the design grid")
    shared(p)
    p.add_argument("--simulate", action="store_true")
    p.add_argument("--mode", choices=("bernoulli", "slot-level"), default="bernoulli")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("frontier", help="optimal loss versus energy budget")
    shared(p)
    p.add_argument("--epsilon-grid", type=_float_list, required=True,
                   help="comma-separated budgets per ms; 'inf' for unconstrained")
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("simulate", help="Monte Carlo simulation of one design point")
    p.add_argument("plant")
    p.add_argument("topology")
    p.add_argument("--h-ms", type=float, required=True)
    p.add_argument("--tau-ms", type=float)
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--c-req", type=float)
    grp.add_argument("--rho", type=float, help="fixed delivery probability")
    p.add_argument("--source", type=int)
    p.add_argument("--horizon-s", type=float, default=500.0)
    p.add_argument("--replicates", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("slot", "bernoulli"), default="bernoulli")
    p.add_argument("--no-trajectory", action="store_true",
                   help="skip sample-path simulation of the plant")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--per-replicate", action="store_true")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.WARNING - 10 * min(args.verbose, 2))
    try:
        return args.func(args)
    except _MissingFile as exc:
        print(f"nccodesign: error: file not found: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, ArithmeticError, OSError) as exc:
        print(f"nccodesign: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
