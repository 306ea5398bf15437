"""Command-line entry point: ``bipedal-nmpc {run,maxpush,timing,catalog}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .scenarios import ScenarioFileError, dump_scenario, resolve_scenario, scenario_catalog
from .sim import Disturbance, ScenarioInvalid, format_timing, push_table, run_episode, timing_study

EXIT_CONFIG = 1


def _force(text: str) -> tuple[float, float]:
    try:
        fx, fy = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected FX,FY in newtons, e.g. 125,0") from None
    return fx, fy


def _ns_range(text: str) -> list[int]:
    """``"1..6"``, ``"2-4"`` or ``"1,3,5"``."""
    try:
        for sep in ("..", "-"):
            if sep in text:
                lo, hi = (int(v) for v in text.split(sep))
                vals = list(range(lo, hi + 1))
                break
        else:
            vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected a range like 1..6 or a list like 1,2,3") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("iteration counts must be >= 1")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bipedal-nmpc", description="NMPC gait generation on a pendulum-plus-flywheel model")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one episode and write CSV + JSON")
    run.add_argument("scenario", help="scenario file (.yaml optional) or catalog name")
    run.add_argument("--strategy", type=int, choices=(1, 2, 3, 4))
    run.add_argument("--push", type=_force, help="replace pushes with FX,FY [N] at 2 s for 0.1 s")
    run.add_argument("--out", default="out", help="output directory")

    mp = sub.add_parser("maxpush", help="bisection search for the largest rejected push")
    mp.add_argument("scenario")
    mp.add_argument("--axis", choices=("x", "y"), default="x")
    mp.add_argument("--strategy", type=int, choices=(1, 2, 3, 4), action="append",
                    help="repeatable; default all four")

    tm = sub.add_parser("timing", help="SQP iteration-count sweep")
    tm.add_argument("--ns", type=_ns_range, default=list(range(1, 7)))
    tm.add_argument("--scenario", default="timing-gait")
    tm.add_argument("--repeats", type=int, default=1)

    cat = sub.add_parser("catalog", help="list built-in scenarios or export them as files")
    cat.add_argument("--export", metavar="DIR")
    return ap


def _cmd_run(args) -> int:
    sc = resolve_scenario(args.scenario)
    if args.strategy:
        sc = sc.with_strategy(args.strategy)
    if args.push is not None:
        sc = replace(sc, disturbances=(Disturbance(2.0, 0.1, args.push),))
    res = run_episode(sc)
    csv_path, json_path = res.write(args.out)
    o = res.outcome
    when = f" at t={o.t:.3f} s" if o.t is not None and not o.completed else ""
    print(f"{sc.name}: strategy {sc.toggles.number} {o.kind}{when} {o.reason}".rstrip())
    print(f"wrote {csv_path} and {json_path}")
    return o.exit_code


def _cmd_maxpush(args) -> int:
    sc = resolve_scenario(args.scenario)
    strategies = args.strategy or [1, 2, 3, 4]
    table = push_table(sc, strategies, (args.axis,))
    print(f"{'scenario':<22} {'axis':<4} " + " ".join(f"{'S' + str(s):>6}" for s in strategies))
    print(f"{sc.name:<22} {args.axis:<4} " + " ".join(f"{table[(args.axis, s)]:>6.0f}" for s in strategies))
    return 0


def _cmd_timing(args) -> int:
    sc = resolve_scenario(args.scenario)
    print(format_timing(timing_study(sc, args.ns, args.repeats)))
    return 0


def _cmd_catalog(args) -> int:
    cat = scenario_catalog()
    if args.export:
        out = Path(args.export)
        out.mkdir(parents=True, exist_ok=True)
        for name, sc in cat.items():
            (out / f"{name}.yaml").write_text(dump_scenario(sc))
            print(out / f"{name}.yaml")
    else:
        for name, sc in cat.items():
            print(f"{name:<22} strategy {sc.toggles.number}  {sc.sim.duration:.1f} s")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = {"run": _cmd_run, "maxpush": _cmd_maxpush, "timing": _cmd_timing, "catalog": _cmd_catalog}[args.command]
    try:
        return handler(args)
    except (ScenarioFileError, ScenarioInvalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
