"""Command-line interface: run, sweep, compare-txmode, oracle-check.

Exit code 0 only when every requested case converged (and, for
oracle-check, matched). Model paths are tried as given first, then against
the bundled fixture directory (COSIMPF_FIXTURES overrides it).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import oracle
from .coupling import (
    LOOSE,
    CoSimConfig,
    co_iterate,
    initial_boundary,
    run_loose,
    run_timeseries,
    write_trace_csv,
)
from .errors import BaseMismatchError, ConvergenceError, CosimError, ModelError
from .modelio import (
    ReportRow,
    RunReport,
    Scenario,
    boundary_columns,
    fixture_path,
    load_feeder,
    load_models,
    load_scenario,
    load_transmission,
    write_report_csv,
)
from .seqframes import unbalance_percent
from .txsolver import POSITIVE_ONLY, THREE_SEQUENCE

log = logging.getLogger(__name__)

ORACLE_TOL = 1e-4
NODE_GUARD = 600  # phase-node limit for the desk-scale referee


def _resolve(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    bundled = fixture_path(path)
    if bundled.exists():
        return bundled
    raise ModelError(f"{path}: no such file (also tried {bundled})")


def build_case(network: str, feeders_spec: str):
    """Assemble (tx, feeders) from --network and --feeders BUS=PATH[,...]."""
    tx = load_transmission(_resolve(network))
    pcc = []
    feeders = []
    for item in feeders_spec.split(","):
        if "=" not in item:
            raise ModelError(
                f"--feeders entry {item!r} must be BUS=feeder-file"
            )
        bus, _, path = item.partition("=")
        pcc.append(bus.strip())
        feeders.append(load_feeder(_resolve(path.strip())))
    tx = tx.replace_pcc(tuple(pcc))
    for f in feeders:
        if f.base_mva != tx.base_mva:
            raise BaseMismatchError(
                f"feeder {f.name} base {f.base_mva} MVA does not match network "
                f"base {tx.base_mva} MVA"
            )
    return tx, feeders


def _load_case_args(args):
    if getattr(args, "case", None):
        return load_models(_resolve(args.case))
    if not args.network or not args.feeders:
        raise ModelError("need --case, or both --network and --feeders")
    return build_case(args.network, args.feeders)


def measure_unbalance(state) -> tuple[float, float]:
    """Max percent current and voltage unbalance over the PCCs."""
    iu = max(unbalance_percent(i) for i in state.i_abc)
    vu = max(unbalance_percent(v) for v in state.v_d)
    return iu, vu


def calibrate_phase_a(tx, feeders, multiplier: float, target_pct: float,
                      cfg: CoSimConfig, tol_pct: float = 0.5,
                      max_bisect: int = 30):
    """Phase-A allocation factor hitting a PCC current-unbalance target.

    Lowering phase A raises the unbalance monotonically; bisection on
    [0, 1] until the measured value is within tol_pct of the target.
    Returns (factor, measured_pct). Raises ConvergenceError when the
    target cannot be reached.
    """

    def measure(factor: float) -> float:
        fs = [f.with_loading(multiplier, (factor, 1.0, 1.0)) for f in feeders]
        state, _ = co_iterate(tx, fs, cfg, initial_boundary(fs))
        return measure_unbalance(state)[0]

    if target_pct <= 0.0:
        return 1.0, measure(1.0)
    # keep away from the exactly-unloaded-phase degenerate point
    lo, hi = 0.01, 1.0  # unbalance(lo) is max, unbalance(hi) ~ 0
    u_lo = measure(lo)
    if u_lo < target_pct - tol_pct:
        raise ConvergenceError(
            f"current unbalance target {target_pct}% unreachable "
            f"(max achievable {u_lo:.1f}%)"
        )
    factor = 0.5
    measured = float("nan")
    for _ in range(max_bisect):
        factor = 0.5 * (lo + hi)
        measured = measure(factor)
        if abs(measured - target_pct) <= tol_pct:
            return factor, measured
        if measured > target_pct:
            lo = factor
        else:
            hi = factor
    raise ConvergenceError(
        f"unbalance calibration did not settle (target {target_pct}%, "
        f"last {measured:.2f}%)"
    )


def sweep_cases(tx, feeders, multipliers, targets, methods, base_cfg=None):
    """Cartesian (multiplier x unbalance target) study; one report row per
    method per cell, plus the calibrated factor per cell."""
    base_cfg = base_cfg or CoSimConfig()
    calib_cfg = CoSimConfig(
        eps=base_cfg.eps, method="newton", tx_mode=base_cfg.tx_mode
    )
    report = RunReport()
    cells = []
    for mult in multipliers:
        for target in targets:
            label = f"m{mult:g}_u{target:g}"
            try:
                factor, measured = calibrate_phase_a(
                    tx, feeders, mult, target, calib_cfg
                )
            except (ConvergenceError, CosimError) as exc:
                log.warning("cell %s skipped: %s", label, exc)
                cells.append({"case": label, "multiplier": mult,
                              "target_pct": target, "skipped": str(exc)})
                report.rows.append(ReportRow(
                    case=label, method="-", n_iterations=0, wall_s=0.0,
                    converged=False,
                ))
                continue
            fs = [f.with_loading(mult, (factor, 1.0, 1.0)) for f in feeders]
            cell = {"case": label, "multiplier": mult, "target_pct": target,
                    "alloc_factor_a": factor}
            for method in methods:
                cfg = CoSimConfig(eps=base_cfg.eps, method=method,
                                  tx_mode=base_cfg.tx_mode,
                                  alpha=base_cfg.alpha,
                                  max_coiter=base_cfg.max_coiter)
                tic = time.perf_counter()
                try:
                    state, trace = co_iterate(tx, fs, cfg, initial_boundary(fs))
                    wall = time.perf_counter() - tic
                    iu, vu = measure_unbalance(state)
                    report.rows.append(ReportRow(
                        case=label, method=method,
                        n_iterations=trace.iterations, wall_s=wall,
                        converged=True, unbalance_current_pct=iu,
                        unbalance_voltage_pct=vu,
                        boundary=boundary_columns(state),
                    ))
                    cell[f"{method}_n"] = trace.iterations
                    cell[f"{method}_t_s"] = wall
                    cell["measured_current_pct"] = iu
                    cell["measured_voltage_pct"] = vu
                except ConvergenceError as exc:
                    wall = time.perf_counter() - tic
                    n = exc.trace.iterations if exc.trace else 0
                    report.rows.append(ReportRow(
                        case=label, method=method, n_iterations=n,
                        wall_s=wall, converged=False,
                    ))
                    cell[f"{method}_n"] = n
                    cell[f"{method}_t_s"] = wall
                    cell[f"{method}_failed"] = True
            cells.append(cell)
    return report, cells


def _write_cells_csv(cells, methods, path):
    import csv

    cols = ["case", "multiplier", "target_pct", "alloc_factor_a",
            "measured_current_pct", "measured_voltage_pct"]
    for m in methods:
        cols += [f"{m}_n", f"{m}_t_s"]
    cols.append("skipped")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for cell in cells:
            writer.writerow([
                format(cell[c], ".17g") if isinstance(cell.get(c), float)
                else str(cell.get(c, ""))
                for c in cols
            ])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    tx, feeders = _load_case_args(args)
    scenario = (load_scenario(_resolve(args.scenario)) if args.scenario
                else Scenario.constant())
    cfg = CoSimConfig(eps=args.eps, alpha=args.alpha, max_coiter=args.max_iter,
                      method=args.method, tx_mode=args.tx_mode)
    out = _out_dir(args)
    report = RunReport()
    traces = []
    failed = None
    try:
        if args.method == LOOSE:
            traces = run_loose(tx, feeders, scenario, cfg)
        else:
            traces = run_timeseries(tx, feeders, scenario, cfg)
    except ConvergenceError as exc:
        failed = exc
        if exc.trace is not None:
            traces = list(traces) + [exc.trace]

    for trace in traces:
        last = trace.records[-1]
        state_like = type("S", (), {})()
        state_like.s_t, state_like.v_d, state_like.s_d = last.s_t, last.v_d, last.s_d
        report.rows.append(ReportRow(
            case=f"t{trace.t}", method=args.method,
            n_iterations=trace.iterations,
            wall_s=sum(r.elapsed_ms for r in trace.records) / 1e3,
            converged=trace.converged,
            boundary=boundary_columns(state_like),
        ))
    if traces:
        write_trace_csv(traces, out / "trace.csv")
    write_report_csv(report, out / "report.csv")
    print(f"wrote {out / 'trace.csv'} and {out / 'report.csv'}")
    if failed is not None:
        print(f"FAILED: {failed}", file=sys.stderr)
        return 1
    if not report.all_converged:
        print("some steps did not converge", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    tx, feeders = _load_case_args(args)
    methods = [m.strip() for m in args.methods.split(",")]
    multipliers = [float(x) for x in args.multipliers.split(",")]
    targets = [float(x) for x in args.unbalance.split(",")]
    cfg = CoSimConfig(eps=args.eps, tx_mode=args.tx_mode)
    report, cells = sweep_cases(tx, feeders, multipliers, targets, methods, cfg)
    out = _out_dir(args)
    _write_cells_csv(cells, methods, out / "sweep.csv")
    write_report_csv(report, out / "sweep_report.csv")
    print(f"wrote {out / 'sweep.csv'} ({len(cells)} cells)")
    return 0 if report.all_converged else 1


def cmd_compare_txmode(args) -> int:
    import csv

    tx, feeders = _load_case_args(args)
    targets = [float(x) for x in args.unbalance.split(",")]
    out = _out_dir(args)
    calib_cfg = CoSimConfig(eps=args.eps, method="newton")
    rows = []
    ok = True
    for target in targets:
        try:
            factor, measured = calibrate_phase_a(
                tx, feeders, args.multiplier, target, calib_cfg
            )
            fs = [f.with_loading(args.multiplier, (factor, 1.0, 1.0))
                  for f in feeders]
            v1 = {}
            for mode in (THREE_SEQUENCE, POSITIVE_ONLY):
                cfg = CoSimConfig(eps=args.eps, method=args.method, tx_mode=mode)
                state, _ = co_iterate(tx, fs, cfg, initial_boundary(fs))
                v1[mode] = abs(state.v_t[0].x2)
            rows.append([f"u{target:g}", target, measured,
                         v1[THREE_SEQUENCE], v1[POSITIVE_ONLY],
                         abs(v1[THREE_SEQUENCE] - v1[POSITIVE_ONLY])])
        except (ConvergenceError, CosimError) as exc:
            ok = False
            print(f"case u{target:g} failed: {exc}", file=sys.stderr)
    path = out / "txmode.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "target_pct", "measured_pct",
                         "v1_threeseq_pu", "v1_posseq_pu", "abs_diff_pu"])
        for row in rows:
            writer.writerow([row[0]] + [format(x, ".17g") for x in row[1:]])
    print(f"wrote {path} ({len(rows)} cases)")
    return 0 if ok else 1


def cmd_oracle_check(args) -> int:
    try:
        tx, feeders = _load_case_args(args)
        model = oracle.assemble_combined(tx, feeders)
    except BaseMismatchError as exc:
        print(f"FAIL (base mismatch): {exc}", file=sys.stderr)
        return 2
    if model.n_phase_nodes > NODE_GUARD:
        print(f"model too large for the oracle referee "
              f"({model.n_phase_nodes} phase nodes > {NODE_GUARD})",
              file=sys.stderr)
        return 1
    try:
        mono = oracle.solve_monolithic(model)
    except ConvergenceError as exc:
        print(f"ORACLE FAILED to converge: {exc}", file=sys.stderr)
        return 3

    def deviation(state):
        dev = 0.0
        for k in range(len(feeders)):
            dev = max(dev, float(np.max(np.abs(
                state.v_d[k].as_array() - mono.pcc_v[k].as_array()))))
            dev = max(dev, float(np.max(np.abs(
                state.s_d[k].as_array() - mono.pcc_s[k].as_array()))))
        return dev

    ok = True
    for method in ("fpi", "newton"):
        cfg = CoSimConfig(eps=args.eps, method=method)
        try:
            state, trace = co_iterate(tx, feeders, cfg, initial_boundary(feeders))
        except ConvergenceError as exc:
            print(f"{method}: did not converge: {exc}", file=sys.stderr)
            ok = False
            continue
        dev = deviation(state)
        passed = dev <= ORACLE_TOL
        ok = ok and passed
        print(f"{method}: N={trace.iterations} max boundary deviation "
              f"{dev:.3e} pu -> {'PASS' if passed else 'FAIL'}")
    loose_traces = run_loose(tx, feeders, Scenario.constant(1),
                             CoSimConfig(eps=args.eps, method=LOOSE))
    rec = loose_traces[0].records[-1]
    state_like = type("S", (), {})()
    state_like.v_d, state_like.s_d = rec.v_d, rec.s_d
    print(f"loose (informational): one-exchange deviation "
          f"{deviation(state_like):.3e} pu")
    return 0 if ok else 2


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosimpf",
        description="Quasi-static T&D co-simulation power flow",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--case", help="case file (network + feeders)")
        p.add_argument("--network", help="transmission model file")
        p.add_argument("--feeders",
                       help="comma list of BUS=feeder-file attachments")
        p.add_argument("--eps", type=float, default=1e-4,
                       help="interface residual tolerance")
        p.add_argument("--out", default="out", help="output directory")

    p_run = sub.add_parser("run", help="run a (time-series) co-simulation")
    common(p_run)
    p_run.add_argument("--method", choices=["fpi", "newton", "loose"],
                       default="fpi")
    p_run.add_argument("--alpha", type=float, default=-1.0,
                       help="FPI relaxation parameter")
    p_run.add_argument("--max-iter", type=int, default=50, dest="max_iter")
    p_run.add_argument("--tx-mode", choices=[THREE_SEQUENCE, POSITIVE_ONLY],
                       default=THREE_SEQUENCE, dest="tx_mode")
    p_run.add_argument("--scenario", help="scenario file (default: one step)")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="multiplier x unbalance study")
    common(p_sweep)
    p_sweep.add_argument("--multipliers", default="1,1.5,2,2.5")
    p_sweep.add_argument("--unbalance", default="0,20,40,60",
                         help="percent current-unbalance targets")
    p_sweep.add_argument("--methods", default="fpi,newton")
    p_sweep.add_argument("--tx-mode", choices=[THREE_SEQUENCE, POSITIVE_ONLY],
                         default=THREE_SEQUENCE, dest="tx_mode")
    p_sweep.set_defaults(func=cmd_sweep)

    p_cmp = sub.add_parser("compare-txmode",
                           help="three-sequence vs positive-sequence-only")
    common(p_cmp)
    p_cmp.add_argument("--unbalance", default="20,40,50,60")
    p_cmp.add_argument("--multiplier", type=float, default=1.0)
    p_cmp.add_argument("--method", choices=["fpi", "newton"], default="newton")
    p_cmp.set_defaults(func=cmd_compare_txmode)

    p_oc = sub.add_parser("oracle-check",
                          help="compare co-simulation against the monolithic solve")
    common(p_oc)
    p_oc.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CosimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
