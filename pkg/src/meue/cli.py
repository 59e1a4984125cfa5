"""Command line entry point: ``meue run|oracle|analyze``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import analysis_report, kl_projection_oracle, solve_user_equilibrium
from .dynamics import ConfigError
from .harness import SCENARIOS, make_scenario, run_scenario
from .network import NetworkFormatError, builtin_network, load_tntp
from .routing import RouteError, builtin_routes, read_routes

BUILTINS = ("3n4l", "counterexample", "siouxfalls")


def _network(net_arg: str | None, trips: str | None, default: str = "3n4l"):
    if net_arg is None:
        return builtin_network(default)
    if net_arg in BUILTINS:
        return builtin_network(net_arg)
    if trips is None:
        raise ConfigError("--trips is required with a TNTP --net file")
    return load_tntp(net_arg, trips)


def _read_vector(path) -> np.ndarray:
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return np.asarray(json.loads(text), dtype=float)
    return np.asarray(text.replace(",", " ").split(), dtype=float)


def _routes(net, path):
    return read_routes(net, path) if path else builtin_routes(net)


def cmd_run(args) -> int:
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        if not isinstance(overrides, dict):
            raise ConfigError("config override file must hold a JSON object")
    if args.net is not None:
        overrides["network"] = args.net if args.net in BUILTINS else (args.net, args.trips)
        if args.net not in BUILTINS and args.trips is None:
            raise ConfigError("--trips is required with a TNTP --net file")
    sc = make_scenario(args.scenario, out_dir=args.out, seed=args.seed, overrides=overrides)
    status = run_scenario(sc, workers=args.workers)
    print(f"{sc.name}: {'ok' if status == 0 else 'some runs failed'}; results in {sc.out_dir}")
    return status


def cmd_oracle(args) -> int:
    net = _network(args.net, args.trips)
    rs = _routes(net, args.routes)
    p0 = _read_vector(args.p0)
    mode = args.mode or ("parametric_3n4l" if net.name == "3n4l" and rs.n_routes == 4 else "dual_ascent")
    x_star = _read_vector(args.x_star) if args.x_star else None
    if mode == "dual_ascent" and x_star is None:
        x_star = solve_user_equilibrium(net).x
    res = kl_projection_oracle(net, rs, p0, mode=mode, x_star=x_star)
    print(json.dumps(res.to_dict(), indent=2))
    return 0 if res.converged else 1


def cmd_analyze(args) -> int:
    state = json.loads(Path(args.state).read_text())
    if "p" not in state:
        raise ConfigError("state file needs a 'p' entry")
    net = _network(state.get("network", args.net), state.get("trips", args.trips))
    rs = _routes(net, state.get("routes", args.routes))
    s0 = np.asarray(state["s0"], dtype=float) if "s0" in state else None
    print(json.dumps(analysis_report(np.asarray(state["p"], dtype=float), rs, r=float(state.get("r", 0.0)), s0=s0), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="meue", description="Cumulative logit dynamics and maximum-entropy user equilibrium")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("scenario", help=f"one of: {', '.join(SCENARIOS)}")
    run.add_argument("--net")
    run.add_argument("--trips")
    run.add_argument("--out", default="out")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--config", help="JSON file overriding scenario fields")
    run.set_defaults(func=cmd_run)

    orc = sub.add_parser("oracle", help="KL projection of p0 onto the UE set")
    orc.add_argument("--net", help="builtin name or TNTP network file")
    orc.add_argument("--trips")
    orc.add_argument("--routes", help="route list file (default: builtin enumeration)")
    orc.add_argument("--p0", required=True, help="reference strategy, JSON list or whitespace separated")
    orc.add_argument("--x-star", help="UE link flows (solved when omitted)")
    orc.add_argument("--mode", choices=("dual_ascent", "parametric_3n4l"))
    orc.set_defaults(func=cmd_oracle)

    ana = sub.add_parser("analyze", help="entropy and proportionality report of a strategy")
    ana.add_argument("--state", required=True, help="JSON with p and optionally network, routes, r, s0")
    ana.add_argument("--net")
    ana.add_argument("--trips")
    ana.add_argument("--routes")
    ana.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, NetworkFormatError, RouteError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"meue: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
