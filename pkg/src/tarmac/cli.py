"""Command line front end.

Chains config -> calibrate -> build -> solve -> evaluate -> compare and
writes CSV artifacts plus a JSON run manifest next to each output.  Every
CSV starts with a `# config_hash=...` comment naming the airport config
it was produced from; JSON outputs carry the same hash as a top-level
key.  Exit codes: 0 success, 1 domain error, 2 usage error.
"""

import argparse
import csv
import json
import os
import sys
import time
import zlib

import numpy as np

from . import __version__
from .calibration import (
    DEFAULT_CLEARANCE,
    LIGHT_TRAFFIC_THRESHOLD,
    SATURATION_THRESHOLD,
    align_saturation_shift,
    calibrate_model_params,
    ingest_ops_records,
)
from .dynamics import cached_transition_model, default_cache_dir
from .evaluator import (
    DEFAULT_BATCHES,
    DEFAULT_STEPS,
    DEFAULT_WARMUP,
    MlsController,
    PolicyController,
    ThresholdController,
    compare_frontiers,
    frontier_table,
    simulate,
    sweep,
)
from .optimizer import Policy, build_cost_vector, extract_policy, solve_average_cost
from .topology import FAIRNESS_MODES, config_hash, load_topology

# library failures (config, statistics, solver, chain structure, IO) are
# domain errors; anything else is a bug and propagates
DOMAIN_ERRORS = (ValueError, RuntimeError, IndexError, OSError)


def split_seed(seed: int, label: str) -> int:
    """Per-component stream from the single --seed, keyed by a fixed label."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(label.encode())])
    return int(ss.generate_state(1, np.uint64)[0])


def parse_grid(spec: str) -> list:
    """Grid mini-grammar: log:lo:hi:n | lin:lo:hi:n | explicit v1,v2,..."""
    if spec.startswith(("log:", "lin:")):
        parts = spec.split(":")
        if len(parts) != 4:
            raise ValueError(f"grid spec {spec!r} needs kind:lo:hi:n")
        kind, lo, hi, n = parts[0], float(parts[1]), float(parts[2]), int(parts[3])
        if n < 1:
            raise ValueError("grid needs at least one point")
        if kind == "log":
            if lo <= 0 or hi <= 0:
                raise ValueError("log grid endpoints must be positive")
            return [float(v) for v in np.geomspace(lo, hi, n)]
        return [float(v) for v in np.linspace(lo, hi, n)]
    vals = [v.strip() for v in spec.split(",") if v.strip()]
    if not vals:
        raise ValueError(f"empty grid spec {spec!r}")
    return [float(v) for v in vals]


# ------------------------------------------------------------ artifacts
def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, cfg_hash, columns, rows, comments=()):
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={cfg_hash}\n")
        for c in comments:
            f.write(f"# {c}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _read_csv(path):
    """(config_hash, columns, rows-as-dicts) of a #-commented CSV."""
    cfg_hash = None
    columns = None
    rows = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line.lstrip("# ")
                if body.startswith("config_hash="):
                    cfg_hash = body.split("=", 1)[1].strip()
                continue
            if not line:
                continue
            fields = next(csv.reader([line]))
            if columns is None:
                columns = fields
            else:
                rows.append(dict(zip(columns, fields)))
    if columns is None:
        raise ValueError(f"{path}: no header row")
    return cfg_hash, columns, rows


def _manifest_path(out):
    return os.path.splitext(out)[0] + ".manifest.json"


def _write_manifest(out, command, args, cfg_hash, seed, outputs, t0):
    params = {
        k: v for k, v in sorted(vars(args).items())
        if k != "func" and not callable(v)
    }
    m = {
        "config_hash": cfg_hash,
        "command": command,
        "parameters": params,
        "tool_version": __version__,
        "seed": seed,
        "outputs": list(outputs),
        "wall_clock_s": round(time.monotonic() - t0, 3),
    }
    path = _manifest_path(out)
    with open(path, "w") as f:
        json.dump(m, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _write_policy_csv(path, cfg_hash, policy):
    rows = []
    for i in range(policy.n_states):
        for k in policy.support(i):
            rows.append((i, int(k), float(policy.probs[i, k]), int(policy.completed[i])))
    _write_csv(path, cfg_hash, ["state", "mask", "prob", "completed"], rows)


def _load_policy_csv(path, model, cfg_hash):
    file_hash, columns, rows = _read_csv(path)
    if file_hash != cfg_hash:
        raise ValueError(
            f"{path}: policy was solved for config {file_hash}, model is {cfg_hash}"
        )
    probs = np.zeros((model.n_states, model.K))
    completed = np.zeros(model.n_states, dtype=bool)
    for row in rows:
        i, k, p = int(row["state"]), int(row["mask"]), float(row["prob"])
        if not (0 <= i < model.n_states and 0 <= k < model.K):
            raise ValueError(f"{path}: state/mask ({i}, {k}) outside the model")
        if model.row_of[i, k] < 0 and p > 0.0:
            raise ValueError(f"{path}: infeasible decision {k} in state {i}")
        probs[i, k] = p
        completed[i] = bool(int(row.get("completed", "0") or 0))
    mass = probs.sum(axis=1)
    bad = np.nonzero(np.abs(mass - 1.0) > 1e-6)[0]
    if bad.size:
        raise ValueError(f"{path}: state {int(bad[0])} rows sum to {mass[bad[0]]:.6f}, not 1")
    probs /= mass[:, None]
    return Policy(probs=probs, completed=completed, completion="file")


def _load_model(args):
    t = load_topology(args.airport)
    h = config_hash(args.airport)
    return t, h, cached_transition_model(t, h, max_states=args.max_states)


def _scheme(t, name):
    if name not in t.observation_schemes:
        known = ", ".join(sorted(t.observation_schemes)) or "none"
        raise ValueError(f"unknown observation level {name!r}; config declares: {known}")
    return t.observation_schemes[name]


def _report_row(report, n_ramps, seed):
    ramps = list(report.ramp_release_rates)
    ramps += [0.0] * (n_ramps - len(ramps))
    return (
        [report.controller, report.param, report.avg_takeoff_rate, report.avg_taxiing,
         report.rate_std]
        + ramps
        + [report.stderr_rate, report.stderr_taxiing, report.steps, report.warmup,
           seed, report.source]
    )


def _metrics_columns(n_ramps):
    return (
        ["controller", "param", "avg_rate", "avg_taxiing", "rate_std"]
        + [f"ramp_release_rate_{r}" for r in range(n_ramps)]
        + ["stderr_rate", "stderr_taxiing", "steps", "warmup", "seed", "source"]
    )


# ---------------------------------------------------------- subcommands
def _cmd_calibrate(args):
    t0 = time.monotonic()
    stats = ingest_ops_records(
        args.flights, args.counts,
        saturation_threshold=args.saturation_threshold,
        light_threshold=args.light_threshold,
        pushback=(args.pushback_mean, args.pushback_std),
    )
    for d in stats.diagnostics:
        print(f"warning: {d}", file=sys.stderr)
    params, paths = calibrate_model_params(
        stats, clearance=(args.clearance_mean, args.clearance_std),
        T_s=args.slot_minutes, L_s=args.cell_length,
    )
    payload = {
        "params": {"L_s": params.L_s, "T_s": params.T_s, "m": params.m,
                   "c1": params.c1, "c2": params.c2},
        "buffer_capacity": params.B,
        "ramp_path_lengths": dict(sorted(paths.items())),
        "stats": {
            "takeoff_rate_mean": stats.takeoff_rate_mean,
            "takeoff_rate_std": stats.takeoff_rate_std,
            "ramp_taxi_stats": {r: list(v) for r, v in sorted(stats.ramp_taxi_stats.items())},
            "n_curve_bins": len(stats.throughput_curve),
            "n_diagnostics": len(stats.diagnostics),
        },
    }
    payload["config_hash"] = config_hash(payload)
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    manifest = _write_manifest(
        args.out, "calibrate", args, payload["config_hash"], None, [args.out], t0
    )
    print(f"calibrated m={params.m:.4f} c1={params.c1:.4f} c2={params.c2:.4f} "
          f"B={params.B} paths={payload['ramp_path_lengths']}")
    print(f"wrote {args.out} and {manifest}")
    return 0


def _cmd_build(args):
    t0 = time.monotonic()
    t, h, model = _load_model(args)
    cache = os.path.join(default_cache_dir(), f"{h}.tmc")
    stats = {
        "config_hash": h,
        "airport": t.name,
        "n_states": model.n_states,
        "n_rows": model.n_rows,
        "nnz": model.nnz,
        "n_decisions": model.K,
        "cache_path": cache,
        "cached": os.path.exists(cache),
    }
    print(f"{t.name}: {model.n_states} states, {model.n_rows} decision rows, "
          f"{model.nnz} transitions (cache {cache})")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(stats, f, indent=2, sort_keys=True)
            f.write("\n")
        manifest = _write_manifest(args.out, "build", args, h, None, [args.out], t0)
        print(f"wrote {args.out} and {manifest}")
    return 0


def _cmd_solve(args):
    t0 = time.monotonic()
    t, h, model = _load_model(args)
    sol = solve_average_cost(model, build_cost_vector(model, args.beta), fairness=args.fairness)
    policy = extract_policy(sol, model=model, completion=args.completion)
    rate, taxiing = sol.lp_metrics()
    _write_policy_csv(args.out, h, policy)
    manifest = _write_manifest(args.out, "solve", args, h, None, [args.out], t0)
    print(f"beta={args.beta:g}: objective={sol.objective:.6f} rate={rate:.4f}/min "
          f"taxiing={taxiing:.3f} ({int(policy.completed.sum())} states completed)")
    print(f"wrote {args.out} and {manifest}")
    return 0


def _cmd_simulate(args):
    t0 = time.monotonic()
    t, h, model = _load_model(args)
    if args.level is not None:
        if args.policy is None:
            raise ValueError("--level needs --policy (belief agent drives a solved table)")
        policy = _load_policy_csv(args.policy, model, h)
        controller = MlsController(policy, _scheme(t, args.level))
    elif args.policy is not None:
        controller = PolicyController(_load_policy_csv(args.policy, model, h))
    elif args.threshold is not None:
        controller = ThresholdController(args.threshold)
    else:
        raise ValueError("pick a controller: --policy, --threshold, or --policy with --level")
    seed = split_seed(args.seed, "simulate")
    report = simulate(
        controller, model, args.steps, args.warmup, seed, n_batches=args.batches
    )
    n_ramps = t.n_ramps
    _write_csv(args.out, h, _metrics_columns(n_ramps),
               [_report_row(report, n_ramps, args.seed)])
    manifest = _write_manifest(args.out, "simulate", args, h, args.seed, [args.out], t0)
    print(f"{report.controller}: rate={report.avg_takeoff_rate:.4f}/min "
          f"(se {report.stderr_rate:.4f}) taxiing={report.avg_taxiing:.3f} "
          f"(se {report.stderr_taxiing:.3f}) over {report.steps} steps")
    print(f"wrote {args.out} and {manifest}")
    return 0


def _cmd_sweep(args):
    t0 = time.monotonic()
    t, h, model = _load_model(args)
    kind = f"{args.kind}_sweep"
    if args.kind == "mls" and args.level is None:
        raise ValueError("mls sweep needs --level naming an observation level")
    scheme = _scheme(t, args.level) if args.kind == "mls" else None
    points = sweep(
        model, kind, args.grid, fairness=args.fairness, obs_scheme=scheme,
        steps=args.steps, warmup=args.warmup, n_batches=args.batches,
        seed=split_seed(args.seed, "sweep"), completion=args.completion,
    )
    for p in points:
        if p.error:
            print(f"warning: {args.kind}={p.param:g} failed: {p.error}", file=sys.stderr)
    columns, rows = frontier_table(points)
    _write_csv(args.out, h, columns, rows)
    manifest = _write_manifest(args.out, "sweep", args, h, args.seed, [args.out], t0)
    ok = sum(1 for p in points if p.report is not None)
    print(f"{args.kind} sweep: {ok}/{len(points)} points solved")
    print(f"wrote {args.out} and {manifest}")
    return 0


class _FrontierRow:
    __slots__ = ("avg_takeoff_rate", "avg_taxiing")

    def __init__(self, rate, taxiing):
        self.avg_takeoff_rate = rate
        self.avg_taxiing = taxiing


def _load_frontier(path):
    cfg_hash, columns, rows = _read_csv(path)
    if "avg_rate" not in columns or "avg_taxiing" not in columns:
        raise ValueError(f"{path}: not a frontier CSV (no avg_rate/avg_taxiing columns)")
    out = []
    for row in rows:
        if row.get("error"):
            continue
        if not row.get("avg_rate"):
            continue
        out.append(_FrontierRow(float(row["avg_rate"]), float(row["avg_taxiing"])))
    return cfg_hash, out


def _cmd_compare(args):
    t0 = time.monotonic()
    h_opt, opt = _load_frontier(args.optimal)
    h_bench, bench = _load_frontier(args.benchmark)
    if h_opt != h_bench:
        raise ValueError(
            f"frontiers come from different configs ({h_opt} vs {h_bench})"
        )
    curve = compare_frontiers(opt, bench)
    rows = list(zip([float(r) for r in curve.rates],
                    [float(r) for r in curve.reductions]))
    _write_csv(args.out, h_opt, ["rate", "taxiing_reduction_pct"], rows)
    manifest = _write_manifest(args.out, "compare", args, h_opt, None, [args.out], t0)
    print(f"reduction over rate [{curve.rates[0]:.4f}, {curve.rates[-1]:.4f}]/min: "
          f"mean {float(curve.reductions.mean()):.2f}% "
          f"max {float(curve.reductions.max()):.2f}%")
    print(f"wrote {args.out} and {manifest}")
    return 0


def _cmd_validate(args):
    t0 = time.monotonic()
    t, h, model = _load_model(args)
    stats = ingest_ops_records(
        args.flights, args.counts,
        saturation_threshold=args.saturation_threshold,
        light_threshold=args.light_threshold,
    )
    for d in stats.diagnostics:
        print(f"warning: {d}", file=sys.stderr)
    if not stats.throughput_curve:
        raise ValueError("observed data has no throughput curve bins")
    data_curve = [(b.count, b.mean_rate) for b in stats.throughput_curve]

    # model curve: long-run take-off rate with the taxiing count held at
    # each threshold; counts past saturation plateau, matching the data
    cmax = int(model.decoded()["count"].max())
    points = sweep(
        model, "threshold_sweep", list(range(cmax + 1)),
        steps=args.steps, warmup=args.warmup, n_batches=args.batches,
        seed=split_seed(args.seed, "validate"),
    )
    model_curve = []
    for p in points:
        if p.error:
            print(f"warning: threshold {p.param:g} failed: {p.error}", file=sys.stderr)
        else:
            model_curve.append((int(p.param), p.report.avg_takeoff_rate))

    shift = align_saturation_shift(model_curve, data_curve)
    rows = [("model", c, r) for c, r in model_curve]
    rows += [("data", c, r) for c, r in data_curve]
    _write_csv(args.out, h, ["curve", "count", "rate_per_min"], rows,
               comments=[f"shift={shift}"])
    manifest = _write_manifest(args.out, "validate", args, h, args.seed, [args.out], t0)
    sat = max(r for _, r in model_curve)
    print(f"model saturates at {sat:.4f}/min; data curve aligns at shift={shift} aircraft")
    print(f"wrote {args.out} and {manifest}")
    return 0


# --------------------------------------------------------------- parser
def _add_model_flags(p):
    p.add_argument("--airport", required=True,
                   help="airport config: JSON path or shipped name (laguardia, seattle)")
    p.add_argument("--max-states", type=int, default=2_000_000,
                   help="abort if the reachable state space exceeds this")


def _add_run_flags(p):
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS,
                   help="total simulated slots including warm-up")
    p.add_argument("--warmup", type=int, default=DEFAULT_WARMUP,
                   help="slots discarded before measurement")
    p.add_argument("--batches", type=int, default=DEFAULT_BATCHES,
                   help="batch count for batch-means standard errors")
    p.add_argument("--seed", type=int, default=0, help="master seed for all randomness")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tarmac",
        description="Departure-flow policies for airport surface control: "
                    "calibrate a model, solve release policies, and compare "
                    "throughput frontiers.",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                    help="parallelism budget (grid points run sequentially when 1)")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("calibrate", help="reduce ops CSVs to model parameters")
    p.add_argument("--flights", required=True, help="flight records CSV")
    p.add_argument("--counts", required=True, help="per-minute surface counts CSV")
    p.add_argument("--out", required=True, help="parameters JSON to write")
    p.add_argument("--saturation-threshold", type=int, default=SATURATION_THRESHOLD)
    p.add_argument("--light-threshold", type=int, default=LIGHT_TRAFFIC_THRESHOLD)
    p.add_argument("--pushback-mean", type=float, default=2.0)
    p.add_argument("--pushback-std", type=float, default=1.33)
    p.add_argument("--clearance-mean", type=float, default=DEFAULT_CLEARANCE[0])
    p.add_argument("--clearance-std", type=float, default=DEFAULT_CLEARANCE[1])
    p.add_argument("--slot-minutes", type=float, default=1.0,
                   help="decision slot length in minutes")
    p.add_argument("--cell-length", type=float, default=200.0,
                   help="taxiway cell length in meters")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("build", help="build (or load) the cached transition model")
    _add_model_flags(p)
    p.add_argument("--out", default=None, help="optional stats JSON to write")
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("solve", help="solve the optimal release policy for one beta")
    _add_model_flags(p)
    p.add_argument("--beta", type=float, required=True,
                   help="idle-runway penalty weight in the stage cost")
    p.add_argument("--fairness", choices=sorted(FAIRNESS_MODES), default=None,
                   help="override the config's ramp fairness mode")
    p.add_argument("--completion", choices=("greedy", "hold"), default="greedy",
                   help="decision rule for states off the optimal support")
    p.add_argument("--out", required=True, help="policy CSV to write")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("simulate", help="run one controller and write its metrics")
    _add_model_flags(p)
    p.add_argument("--policy", default=None, help="policy CSV from solve")
    p.add_argument("--threshold", type=int, default=None,
                   help="release when fewer than this many aircraft are taxiing")
    p.add_argument("--level", default=None,
                   help="observation level name; drives --policy through a belief filter")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="metrics CSV to write")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep", help="sweep a parameter grid into a frontier CSV")
    _add_model_flags(p)
    p.add_argument("--kind", choices=("beta", "threshold", "mls"), required=True)
    p.add_argument("--grid", type=parse_grid, required=True,
                   help="log:lo:hi:n, lin:lo:hi:n, or comma-separated values")
    p.add_argument("--fairness", choices=sorted(FAIRNESS_MODES), default=None)
    p.add_argument("--level", default=None, help="observation level for --kind mls")
    p.add_argument("--completion", choices=("greedy", "hold"), default="greedy")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="frontier CSV to write")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("compare", help="percent taxiing reduction between two frontiers")
    p.add_argument("--optimal", required=True, help="frontier CSV (the better policy)")
    p.add_argument("--benchmark", required=True, help="frontier CSV to compare against")
    p.add_argument("--out", required=True, help="reduction CSV to write")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("validate",
                       help="model throughput curve vs observed data, with alignment shift")
    _add_model_flags(p)
    p.add_argument("--flights", required=True, help="flight records CSV")
    p.add_argument("--counts", required=True, help="per-minute surface counts CSV")
    p.add_argument("--saturation-threshold", type=int, default=SATURATION_THRESHOLD)
    p.add_argument("--light-threshold", type=int, default=LIGHT_TRAFFIC_THRESHOLD)
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="curve CSV to write")
    p.set_defaults(func=_cmd_validate)

    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> int:
    return run()


if __name__ == "__main__":
    sys.exit(main())
