"""Command-line front end: stats estimation, policy solving, simulation,
metrics comparison, and built-in demo data.

Exit codes: 0 success, 2 usage error, 3 data validation error,
4 solver non-convergence. OVDF_OUT_DIR sets the default output directory.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
from pathlib import Path

from . import demo, metrics, sim, solver
from .delays import DelayError, edge_delays
from .roadgraph import GraphError, load_graph, save_graph, without_buses
from .traffic import (
    EstimationConfig,
    StatsError,
    apply_defaults,
    collapse_bus_stats,
    estimate_from_traces,
    load_stats,
    load_traces,
    save_stats,
    save_traces,
)

USAGE_ERROR, DATA_ERROR, NONCONVERGENCE = 2, 3, 4


class UsageError(Exception):
    pass


def _out_dir(value) -> Path:
    path = Path(value if value is not None else os.environ.get("OVDF_OUT_DIR", "."))
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_stats(args) -> int:
    graph = load_graph(args.graph)
    valid_types = {0} | {line.vtype for line in graph.bus_lines}
    records = load_traces(args.trace, xy=args.xy, valid_types=valid_types)
    config = EstimationConfig(
        dwell_window=args.dwell_window,
        snap_radius=args.snap_radius,
        default_speed=args.default_speed,
        radio_range=args.radio_range,
        hop_delay=args.hop_delay,
    )
    stats = estimate_from_traces(records, graph, config)
    if args.allow_defaults and stats.missing:
        stats = apply_defaults(stats, graph, args.default_speed)
    save_stats(stats, args.out)
    covered = len(stats.intersections)
    print(
        f"stats: {covered}/{len(graph.non_ap_ids())} intersections covered, "
        f"{len(stats.segments)} segments, {len(stats.missing)} missing -> {args.out}"
    )
    return 0


def cmd_solve(args) -> int:
    if args.epsilon <= 0:
        raise UsageError("--epsilon must be > 0")
    graph = load_graph(args.graph)
    stats = load_stats(args.stats, graph)
    if args.no_buses:
        stats = collapse_bus_stats(stats, graph)
        graph = without_buses(graph)
        stats.validate(graph)
    if args.allow_defaults and stats.missing:
        stats = apply_defaults(stats, graph)
    delays = edge_delays(graph, stats)
    if args.dump_delays:
        with open(args.dump_delays, "w") as fh:
            fh.write("from,to,vtype,delay_s\n")
            for key in sorted(delays, key=repr):
                fh.write(f"{key[0]},{key[1]},{key[2]},{delays[key]!r}\n")
    config = solver.SolverConfig(
        epsilon=args.epsilon,
        max_iter=args.max_iter,
        brute_force_cap=args.brute_force_cap,
        gauss_seidel=args.gauss_seidel,
    )
    D, policy, report = solver.value_iteration(graph, stats, delays, config)
    with open(args.out_table, "w") as fh:
        json.dump(solver.policy_to_dict(policy, D), fh, indent=1)
        fh.write("\n")
    with open(args.out_delays, "w") as fh:
        fh.write("intersection,delay_s\n")
        for i in sorted(D, key=repr):
            fh.write(f"{i},{D[i]!r}\n")
    print(
        f"solve: {'converged' if report.converged else 'NOT CONVERGED'} "
        f"after {report.iterations} sweeps, residual {report.final_residual:.3e} "
        f"(epsilon {report.epsilon:g}) -> {args.out_table}"
    )
    if report.unreachable:
        print(f"solve: WARNING: AP-unreachable intersections: {list(report.unreachable)}", file=sys.stderr)
    return 0 if report.converged else NONCONVERGENCE


def _one_run(packed):
    scenario, protocol, table, seed = packed
    return sim.run(scenario, protocol, table, seed)


def cmd_simulate(args) -> int:
    scenario = sim.load_scenario(args.scenario)
    protocol = args.protocol.lower()
    table = None
    if protocol.startswith("ovdf"):
        if not args.routing_table:
            raise UsageError(f"protocol {protocol} requires --routing-table")
        with open(args.routing_table) as fh:
            table = solver.policy_from_dict(json.load(fh), scenario.graph)
    out_dir = _out_dir(args.out_dir)
    base_seed = args.seed if args.seed is not None else (scenario.seed or 0)
    seeds = [base_seed + k for k in range(args.seeds)]
    jobs = [(scenario, protocol, table, s) for s in seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_one_run, jobs))
    else:
        results = [_one_run(j) for j in jobs]

    name = args.out or f"metrics_{protocol}.csv"
    summary_rows = []
    ap_positions = [scenario.graph.position(i) for i in sorted(scenario.graph.ap_ids, key=repr)]
    for result in results:
        stem = Path(name).stem
        suffix = f"_s{result.seed}" if len(results) > 1 else ""
        metrics.write_packets_csv(result, out_dir / f"{stem}{suffix}.csv")
        xs = [p.origin_x for p in result.packets] or [0.0]
        ys = [p.origin_y for p in result.packets] or [0.0]
        grid = metrics.GridSpec.cover(xs, ys)
        rows = metrics.coverage_grid(result, grid)
        threshold = metrics.calibrate_valid_threshold([r["generated"] for r in rows])
        grid = metrics.GridSpec(grid.origin_x, grid.origin_y, grid.nx, grid.ny, grid.side, threshold)
        metrics.write_rows_csv(
            metrics.coverage_grid(result, grid), metrics.COVERAGE_FIELDS,
            out_dir / f"coverage_{protocol}{suffix}.csv",
        )
        metrics.write_rows_csv(
            metrics.ratio_by_distance(result, ap_positions, args.bin_width),
            metrics.DISTANCE_FIELDS,
            out_dir / f"distance_{protocol}{suffix}.csv",
        )
        summary_rows.append(metrics.summarize(result))
    metrics.write_rows_csv(summary_rows, metrics.SUMMARY_FIELDS, out_dir / f"summary_{protocol}.csv")
    ratios = [r["delivery_ratio"] for r in summary_rows]
    print(
        f"simulate: {protocol} x{len(results)} seeds, mean delivery ratio "
        f"{sum(ratios) / len(ratios):.3f} -> {out_dir}"
    )
    return 0


def cmd_compare(args) -> int:
    sets: dict[str, list] = {}
    for path in args.metrics:
        result = metrics.read_packets_csv(path)
        sets.setdefault(result.protocol, []).append(result)
    rows = metrics.compare(sets, baseline=args.baseline)
    header = f"{'protocol':<10} {'runs':>4} {'mean':>8} {'sd':>8} {'gain':>8}"
    print(header)
    for row in rows:
        gain = row["gain_vs_baseline"]
        print(
            f"{row['protocol']:<10} {row['runs']:>4} {row['mean_ratio']:>8.4f} "
            f"{row['sd_ratio']:>8.4f} {(f'{gain:+.1%}' if gain is not None else 'n/a'):>8}"
        )
    if args.out:
        metrics.write_rows_csv(rows, metrics.COMPARE_FIELDS, args.out)
    return 0


def cmd_demo(args) -> int:
    out = _out_dir(args.out_dir)
    made = []
    if args.which in ("toy", "all"):
        d = out / "toy"
        d.mkdir(exist_ok=True)
        graph = demo.toy_network()
        stats = demo.toy_stats()
        save_graph(graph, d / "graph.json")
        save_stats(stats, d / "stats.json")
        scenario = sim.Scenario(
            graph=graph, stats=stats, n_vehicles=12, bus_counts={1: 2}, seed=1,
            sim_duration=1800.0, content_hash=sim.scenario_hash(graph, stats),
        )
        sim.save_scenario(scenario, d / "scenario.json", "graph.json", "stats.json")
        made.append(d)
    if args.which in ("grid3", "all"):
        d = out / "grid3"
        d.mkdir(exist_ok=True)
        scenario = demo.grid3x3_scenario()
        stats = demo.calibrated_stats(scenario, warmup=args.warmup)
        scenario.stats = stats
        scenario.content_hash = sim.scenario_hash(scenario.graph, stats)
        save_graph(scenario.graph, d / "graph.json")
        save_stats(stats, d / "stats.json")
        sim.save_scenario(scenario, d / "scenario.json", "graph.json", "stats.json")
        made.append(d)
    if args.which in ("downtown", "all"):
        d = out / "downtown"
        d.mkdir(exist_ok=True)
        scenario = demo.downtown_scenario(n_vehicles=args.vehicles, n_buses=args.buses)
        stats = demo.calibrated_stats(scenario, warmup=args.warmup)
        scenario.stats = stats
        scenario.content_hash = sim.scenario_hash(scenario.graph, stats)
        save_graph(scenario.graph, d / "graph.json")
        save_stats(stats, d / "stats.json")
        sim.save_scenario(scenario, d / "scenario.json", "graph.json", "stats.json")
        made.append(d)
    for d in made:
        print(f"demo: wrote {d}/graph.json, stats.json, scenario.json")
    print("next: ovdf solve --graph <graph.json> --stats <stats.json> "
          "--out-table table.json --out-delays delays.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovdf",
        description="Delay-optimal VSN data forwarding: stats, solver, simulator, metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="estimate traffic statistics from a GPS trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--xy", action="store_true", help="trace columns are x,y meters, not lat,lon")
    p.add_argument("--dwell-window", type=float, default=30.0)
    p.add_argument("--snap-radius", type=float, default=30.0)
    p.add_argument("--default-speed", type=float, default=8.0)
    p.add_argument("--radio-range", type=float, default=150.0)
    p.add_argument("--hop-delay", type=float, default=0.004)
    p.add_argument("--allow-defaults", action="store_true",
                   help="fill unobserved intersections with uniform defaults")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("solve", help="compute the delay-optimal routing table")
    p.add_argument("--graph", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--out-table", required=True)
    p.add_argument("--out-delays", required=True)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--max-iter", type=int, default=10000)
    p.add_argument("--brute-force-cap", type=int, default=8)
    p.add_argument("--gauss-seidel", action="store_true")
    p.add_argument("--no-buses", action="store_true",
                   help="ignore bus lines (the trajectory-blind policy variant)")
    p.add_argument("--allow-defaults", action="store_true")
    p.add_argument("--dump-delays", metavar="CSV", help="also dump per-edge delays")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="run the discrete-event simulator")
    p.add_argument("--scenario", required=True)
    p.add_argument("--protocol", required=True,
                   help="ovdf-p | ovdf-u | gpsr | epidemic (case-insensitive)")
    p.add_argument("--routing-table")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, default=1, help="sweep this many consecutive seeds")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--bin-width", type=float, default=200.0)
    p.add_argument("--out", help="per-packet metrics file name")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="compare metrics files from one scenario")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--baseline")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("demo", help="write built-in demo networks and scenarios")
    p.add_argument("--out-dir")
    p.add_argument("--which", choices=["toy", "grid3", "downtown", "all"], default="all")
    p.add_argument("--vehicles", type=int, default=80)
    p.add_argument("--buses", type=int, default=27)
    p.add_argument("--warmup", type=float, default=1800.0)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (GraphError, StatsError, DelayError, metrics.MetricsError,
            sim.SimulationError, solver.SolverError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
