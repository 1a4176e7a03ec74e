"""Command-line entry point: ``python -m wellfusion <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config, sim, wavecode, weights, well_model
from .errors import ConfigError, SimulationDiverged, WellFusionError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _scenario(args):
    scn = config.load_scenario(args.scenario)
    if getattr(args, "controller", None):
        scn = scn.with_controller(args.controller)
    if getattr(args, "weights", None):
        scn = scn.with_controller(scn.controller, args.weights)
    return scn


def cmd_steady(args) -> int:
    well = config.load_well(args.config)
    op = well_model.solve_operating_point(well)
    top = args.pmax if args.pmax is not None else well.safety_pressure_Pm
    curve = well_model.pressure_flow_curve(well, np.linspace(args.pmin, top, args.points))
    well_model.write_curve_csv(args.out, curve)
    rep = well_model.check_constraints(well, op)
    print(json.dumps({"post_valve_pressure_P": op.post_valve_pressure_P,
                      "layer_flows": list(map(float, op.layer_flows_qv)), "total_flow": op.total_flow,
                      "constraints_ok": rep.ok, "violations": rep.violations()}, indent=2))
    return EXIT_OK


def _run_checked(scn):
    trace = sim.run(scn)
    if trace.diverged:
        raise SimulationDiverged(trace.message, trace)
    return trace


def cmd_simulate(args) -> int:
    scn = _scenario(args)
    try:
        trace = _run_checked(scn)
    except SimulationDiverged as exc:
        if exc.trace is not None:
            exc.trace.write_csv(args.out)
        raise
    trace.write_csv(args.out)
    rep = sim.metrics(trace, scn)
    if args.metrics:
        _write_json(args.metrics, rep.to_dict())
    print(json.dumps(rep.to_dict()["summary"] | {"sum_du": rep.control_variation}, indent=2))
    return EXIT_OK


def cmd_weights(args) -> int:
    scn = _scenario(args)
    base = args.base if args.base else None
    sols = weights.optimal_weights(scn, step=args.step, base_weights=base,
                                   direction=None if args.unit_step else "first")
    _write_json(args.out, {"scenario": scn.name, "weights": [s.w_star for s in sols],
                           "loops": [s.to_dict() for s in sols]})
    if args.sweep:
        weights.write_sweep_csv(args.sweep, sols)
    print(json.dumps([round(s.w_star, 4) for s in sols]))
    return EXIT_OK


def cmd_wavecode(args) -> int:
    scn = _scenario(args)
    if args.mismatch is not None:
        scn = replace(scn, mismatch=sim.MismatchSpec(args.mismatch))
    frame = wavecode.WaveFrame(tuple(int(c) for c in args.bits), args.low, args.high, args.period,
                               guard_time=args.guard, target_loop=args.loop - 1)
    wscn = wavecode.wave_scenario(scn, frame)
    stem = Path(args.out)
    sched = stem.with_name(stem.name + "_schedule.csv")
    with open(sched, "w", encoding="utf-8") as fh:
        fh.write("t,setpoint\n")
        for t, v in wavecode.encode(frame):
            fh.write(f"{t!r},{v!r}\n")
    try:
        trace = _run_checked(wscn)
    except SimulationDiverged as exc:
        if exc.trace is not None:
            exc.trace.write_csv(stem.with_name(stem.name + "_trace.csv"))
        raise
    trace.write_csv(stem.with_name(stem.name + "_trace.csv"))
    res = wavecode.decode(trace, frame)
    doc = {"sent": "".join(map(str, frame.bits)), "decoded": "".join(map(str, res.bits)),
           "symbol_errors": res.symbol_errors, "ser": res.ser, "distortion": res.distortion,
           "oscillation_energy": wavecode.oscillation_energy(trace, frame),
           "confidence": res.confidence.tolist(), "window_means": res.means.tolist(),
           "controller": wscn.controller}
    _write_json(stem.with_name(stem.name + "_decode.json"), doc)
    print(json.dumps({k: doc[k] for k in ("sent", "decoded", "ser", "distortion")}))
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = {}
    for path in args.reports:
        rep = sim.PerformanceReport.from_dict(config.read_json(path))
        name = rep.controller or Path(path).stem
        while name in reports:
            name += "'"
        reports[name] = rep
    try:
        cmp = sim.compare(reports)
    except WellFusionError as exc:
        raise ConfigError(str(exc)) from None
    print(cmp.format())
    if args.out:
        _write_json(args.out, {"table": cmp.table, "winners": cmp.winners, "orderings": cmp.orderings})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wellfusion", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("steady", help="solve the operating point and write the pressure-flow curve")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pmin", type=float, default=0.0)
    s.add_argument("--pmax", type=float, default=None, help="defaults to the safety pressure")
    s.add_argument("--points", type=int, default=141)
    s.set_defaults(func=cmd_steady)

    def controller_opts(q):
        q.add_argument("--controller", choices=sim.CONTROLLER_TYPES)
        q.add_argument("--weights", type=float, nargs="+")

    s = sub.add_parser("simulate", help="run a scenario and write its trace")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")
    controller_opts(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("weights", help="solve the per-loop fusion weights")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sweep")
    s.add_argument("--step", type=float, default=0.005)
    s.add_argument("--base", type=float, nargs="+", help="starting weights (default: the scenario's)")
    s.add_argument("--unit-step", action="store_true", help="analyse lone unit steps, not the opening move")
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("wavecode", help="send a bit frame through one loop and decode it")
    s.add_argument("--scenario", required=True)
    s.add_argument("--bits", required=True)
    s.add_argument("--loop", type=int, default=1, help="1-based target loop")
    s.add_argument("--low", type=float, required=True)
    s.add_argument("--high", type=float, required=True)
    s.add_argument("--period", type=float, required=True)
    s.add_argument("--guard", type=float, default=100.0)
    s.add_argument("--mismatch", type=float, default=None, help="plant/model gain ratio")
    s.add_argument("--out", required=True, help="output stem: <out>_schedule.csv, <out>_trace.csv, <out>_decode.json")
    controller_opts(s)
    s.set_defaults(func=cmd_wavecode)

    s = sub.add_parser("compare", help="tabulate performance reports")
    s.add_argument("--reports", nargs="+", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if hasattr(args, "bits") and (not args.bits or set(args.bits) - {"0", "1"}):
        print("error: --bits must be a string of 0 and 1", file=sys.stderr)
        return EXIT_CONFIG
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        try:
            return args.func(args)
        except SimulationDiverged as exc:
            print(f"diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except (WellFusionError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
