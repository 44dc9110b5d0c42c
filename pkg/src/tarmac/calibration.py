"""Parameter calibration from operational statistics.

The chain: per-minute take-off counts at saturation fix the runway pair
(c1, c2); unimpeded taxi-out times, stripped of pushback and take-off
clearance components, fix the taxiway cell count N and the per-step move
probability m; the residual spreads size the runway buffer B.

All closed forms; the ingestion helpers reduce flight-record CSVs to the
statistics these formulas consume.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InfeasibleStatisticsError
from .topology import ModelParams

DEFAULT_PUSHBACK = (2.0, 1.33)       # minutes, gate maneuver before taxi
DEFAULT_CLEARANCE = (1.65, 1.04)     # minutes, runway occupancy per take-off
SATURATION_THRESHOLD = 14            # taxiing count from which throughput plateaus
LIGHT_TRAFFIC_THRESHOLD = 4          # taxiing count up to which taxi-out is unimpeded


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def solve_bernoulli_pair(mean: float, std: float) -> tuple[float, float]:
    """Split a per-minute count process into two independent Bernoulli
    draws with success probabilities c1 >= c2.

    Matches the first two moments exactly: c1 + c2 = mean and
    c1(1-c1) + c2(1-c2) = std**2.
    """
    if not 0.0 <= mean <= 2.0:
        raise InfeasibleStatisticsError(f"mean {mean} outside [0, 2]")
    var = std * std
    lo2 = max(0.0, mean * (1.0 - mean), (mean - 1.0) * (2.0 - mean))
    hi2 = mean * (1.0 - 0.5 * mean)
    disc = 2.0 * mean - mean * mean - 2.0 * var
    if -1e-9 < disc < 0.0:     # roundoff at the feasibility boundary
        disc = 0.0
    if disc < 0.0 or var < lo2 - 1e-12:
        raise InfeasibleStatisticsError(
            f"std {std} infeasible for mean {mean}: two-Bernoulli sums need "
            f"std in [{math.sqrt(lo2):.6f}, {math.sqrt(max(hi2, 0.0)):.6f}]"
        )
    root = math.sqrt(max(disc, 0.0))
    c1 = 0.5 * (mean + root)
    c2 = 0.5 * (mean - root)
    return c1, c2


def derive_ama_taxi_stats(
    taxiout: tuple[float, float],
    pushback: tuple[float, float] = DEFAULT_PUSHBACK,
    clearance: tuple[float, float] = DEFAULT_CLEARANCE,
) -> tuple[float, float]:
    """Movement-area transit statistics: strip the independent pushback and
    take-off clearance components from unimpeded taxi-out (mean, std)."""
    mean = taxiout[0] - pushback[0] - clearance[0]
    var = taxiout[1] ** 2 - pushback[1] ** 2 - clearance[1] ** 2
    if var < 0.0:
        raise InfeasibleStatisticsError(
            f"taxi-out variance {taxiout[1] ** 2:.4f} below component sum "
            f"{pushback[1] ** 2 + clearance[1] ** 2:.4f}"
        )
    if mean < 0.0:
        raise InfeasibleStatisticsError(f"negative transit mean {mean:.4f}")
    return mean, math.sqrt(var)


def taxiway_real_solution(
    ama_mean: float, ama_std: float, T_s: float
) -> tuple[float, float]:
    """Real-valued (N*, m*) matching both transit moments exactly, before
    integer rounding.  Transit over N cells is negative binomial: mean
    N/m * T_s, variance N(1-m)/m**2 * T_s**2; eliminating N gives
    m* = mu/(mu + sigma**2) in step units and N* = mu * m*.
    """
    if ama_mean <= 0.0:
        raise InfeasibleStatisticsError(f"transit mean {ama_mean} must be positive")
    if not 0.0 <= ama_std < ama_mean:
        raise InfeasibleStatisticsError(
            f"transit std {ama_std} must lie in [0, mean={ama_mean})"
        )
    mu = ama_mean / T_s
    var = (ama_std / T_s) ** 2
    m_star = mu / (mu + var)
    return mu * m_star, m_star


def solve_taxiway_params(
    ama_mean: float, ama_std: float, T_s: float
) -> tuple[int, float]:
    """Cell count N and move probability m from transit (mean, std).

    N rounds the real-valued N* to the nearest integer; m is then
    recomputed as N*T_s/ama_mean so the transit mean is preserved exactly
    (the std absorbs the rounding error).
    """
    n_star, _ = taxiway_real_solution(ama_mean, ama_std, T_s)
    N = _round_half_up(n_star)
    if N < 1:
        raise InfeasibleStatisticsError(f"rounded cell count {N} below 1")
    m = N * T_s / ama_mean
    if not 0.0 < m <= 1.0:
        raise InfeasibleStatisticsError(f"move probability {m:.4f} outside (0, 1]")
    return N, m


def size_runway_buffer(
    ama_std: float, clearance_std: float, takeoff_rate: float
) -> int:
    """Runway queue capacity: three standard deviations of arrival spread,
    expressed in take-off clearances."""
    if takeoff_rate <= 0.0:
        raise InfeasibleStatisticsError(f"take-off rate {takeoff_rate} must be positive")
    spread = 3.0 * math.sqrt(ama_std * ama_std + clearance_std * clearance_std)
    return _round_half_up(spread / takeoff_rate)


@dataclass(frozen=True)
class ThroughputBin:
    """One point of the throughput curve: take-off rate statistics over the
    minutes with a given taxiing-aircraft count."""

    count: int
    mean_rate: float
    q1: float
    median: float
    q3: float
    n_minutes: int


@dataclass(frozen=True)
class OpsStatistics:
    """Reduced operational statistics feeding the calibration chain.

    ramp_taxi_stats maps ramp id -> (mean, std) of unimpeded taxi-out
    minutes; pushback stats are config values, not measured here.
    """

    takeoff_rate_mean: float
    takeoff_rate_std: float
    ramp_taxi_stats: dict
    pushback_mean: float = DEFAULT_PUSHBACK[0]
    pushback_std: float = DEFAULT_PUSHBACK[1]
    throughput_curve: tuple = ()
    diagnostics: tuple = ()

    def __post_init__(self):
        if self.takeoff_rate_mean < 0 or self.takeoff_rate_std < 0:
            raise ConfigError("take-off rate statistics must be nonnegative")
        for ramp, (mean, std) in self.ramp_taxi_stats.items():
            if mean < 0 or std < 0:
                raise ConfigError(f"ramp {ramp!r} taxi statistics must be nonnegative")
        for b in self.throughput_curve:
            if b.count < 0 or b.n_minutes < 1:
                raise ConfigError(f"bad throughput bin {b}")


def _read_rows(path, columns):
    """Yield (line_number, dict) for well-formed rows; collect diagnostics
    for the rest."""
    diags = []
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header != list(columns):
            raise ConfigError(
                f"{path}: header {header} does not match expected {list(columns)}"
            )
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(columns):
                diags.append(f"{path}:{lineno}: expected {len(columns)} fields, got {len(raw)}")
                continue
            rows.append((lineno, [c.strip() for c in raw]))
    return rows, diags


def ingest_ops_records(
    flights_csv,
    counts_csv,
    saturation_threshold: int = SATURATION_THRESHOLD,
    light_threshold: int = LIGHT_TRAFFIC_THRESHOLD,
    pushback: tuple[float, float] = DEFAULT_PUSHBACK,
) -> OpsStatistics:
    """Reduce flight records and per-minute surface counts to calibration
    statistics.

    flights_csv: flight_id, ramp_id, pushback_minute, wheels_off_minute.
    counts_csv: minute, n_taxiing, n_takeoffs.  Malformed rows are skipped
    with a line-numbered diagnostic; results are invariant to row order.
    """
    frows, fdiags = _read_rows(
        flights_csv, ("flight_id", "ramp_id", "pushback_minute", "wheels_off_minute")
    )
    crows, cdiags = _read_rows(counts_csv, ("minute", "n_taxiing", "n_takeoffs"))
    diags = fdiags + cdiags

    minute_count = {}
    minute_rate = {}
    for lineno, (minute, n_taxi, n_toff) in crows:
        try:
            minute, n_taxi, n_toff = int(minute), int(n_taxi), int(n_toff)
        except ValueError as exc:
            diags.append(f"{counts_csv}:{lineno}: {exc}")
            continue
        if n_taxi < 0 or n_toff < 0:
            diags.append(f"{counts_csv}:{lineno}: negative count")
            continue
        if minute in minute_count and minute_count[minute] != n_taxi:
            diags.append(f"{counts_csv}:{lineno}: conflicting duplicate minute {minute}")
            continue
        minute_count[minute] = n_taxi
        minute_rate[minute] = n_toff

    flights = []
    for lineno, (fid, ramp, push, wheels) in frows:
        try:
            push, wheels = int(push), int(wheels)
        except ValueError as exc:
            diags.append(f"{flights_csv}:{lineno}: {exc}")
            continue
        if wheels <= push:
            diags.append(f"{flights_csv}:{lineno}: wheels-off {wheels} not after pushback {push}")
            continue
        flights.append((fid, ramp, push, wheels))

    # sorted reductions keep the results exactly order-independent
    sat = np.array(
        sorted(r for mn, r in minute_rate.items() if minute_count[mn] >= saturation_threshold),
        dtype=float,
    )
    if sat.size == 0:
        raise InfeasibleStatisticsError(
            f"no minutes at or above saturation threshold {saturation_threshold}"
        )
    rate_mean = float(sat.mean())
    rate_std = float(sat.std())

    per_ramp = {}
    for fid, ramp, push, wheels in sorted(flights, key=lambda f: (f[1], f[2], f[0])):
        cnt = minute_count.get(push)
        if cnt is None:
            diags.append(f"{flights_csv}: flight {fid}: pushback minute {push} not in counts file")
            continue
        if cnt <= light_threshold:
            per_ramp.setdefault(ramp, []).append(float(wheels - push))
    ramp_stats = {}
    for ramp in sorted(per_ramp):
        arr = np.array(per_ramp[ramp])
        ramp_stats[ramp] = (float(arr.mean()), float(arr.std()))

    by_count = {}
    for mn in sorted(minute_count):
        by_count.setdefault(minute_count[mn], []).append(float(minute_rate[mn]))
    curve = []
    if by_count:
        for c in range(min(by_count), max(by_count) + 1):
            if c not in by_count:
                warnings.warn(f"throughput curve: no minutes with taxiing count {c}, bin omitted")
                continue
            arr = np.array(by_count[c])
            q1, med, q3 = np.percentile(arr, [25.0, 50.0, 75.0])
            curve.append(
                ThroughputBin(c, float(arr.mean()), float(q1), float(med), float(q3), arr.size)
            )

    return OpsStatistics(
        takeoff_rate_mean=rate_mean,
        takeoff_rate_std=rate_std,
        ramp_taxi_stats=ramp_stats,
        pushback_mean=pushback[0],
        pushback_std=pushback[1],
        throughput_curve=tuple(curve),
        diagnostics=tuple(diags),
    )


def _curve_arrays(curve):
    pts = []
    for b in curve:
        if isinstance(b, ThroughputBin):
            pts.append((b.count, b.mean_rate))
        else:
            pts.append((int(b[0]), float(b[1])))
    pts.sort()
    counts = np.array([p[0] for p in pts], dtype=int)
    rates = np.array([p[1] for p in pts])
    if counts.size != np.unique(counts).size:
        raise ConfigError("throughput curve has duplicate counts")
    return counts, rates


def _plateau_level(counts, rates, tol):
    """Saturation level: mean over the trailing run of bins within tol of
    the curve maximum.  None when no two consecutive bins qualify."""
    top = rates.max()
    ok = rates >= (1.0 - tol) * top
    best = None
    run = 0
    for i in range(len(rates)):
        if ok[i] and (run == 0 or counts[i] == counts[i - 1] + 1):
            run += 1
        elif ok[i]:
            run = 1
        else:
            run = 0
        if run >= 2:
            best = i
    if best is None:
        return None
    lo = best
    while lo > 0 and ok[lo - 1] and counts[lo] == counts[lo - 1] + 1:
        lo -= 1
    return float(rates[lo : best + 1].mean())


def align_saturation_shift(model_curve, data_curve, plateau_tol=0.05, floor_frac=0.30):
    """Integer count shift s minimizing the squared rate gap between the
    model curve at count c and the data curve at count c + s.

    Only bins with rate at or above floor_frac of their curve's saturation
    level enter the fit, so the noisy light-traffic foot is ignored.
    """
    from .errors import CurveAlignmentError

    mc, mr = _curve_arrays(model_curve)
    dc, dr = _curve_arrays(data_curve)
    m_sat = _plateau_level(mc, mr, plateau_tol)
    d_sat = _plateau_level(dc, dr, plateau_tol)
    if m_sat is None or d_sat is None:
        which = "model" if m_sat is None else "data"
        raise CurveAlignmentError(f"{which} curve reaches no saturation plateau")
    m_keep = mr >= floor_frac * m_sat
    d_keep = dr >= floor_frac * d_sat
    m_map = {int(c): float(r) for c, r in zip(mc[m_keep], mr[m_keep])}
    d_map = {int(c): float(r) for c, r in zip(dc[d_keep], dr[d_keep])}

    lo = min(d_map) - max(m_map)
    hi = max(d_map) - min(m_map)
    best_s, best_err = None, None
    for s in range(lo, hi + 1):
        common = [c for c in m_map if c + s in d_map]
        if len(common) < 2:
            continue
        err = sum((m_map[c] - d_map[c + s]) ** 2 for c in common) / len(common)
        if best_err is None or err < best_err - 1e-15:
            best_s, best_err = s, err
    if best_s is None:
        raise CurveAlignmentError("curves share no overlapping fit region at any shift")
    return best_s


def calibrate_model_params(
    stats: OpsStatistics,
    clearance: tuple[float, float] = DEFAULT_CLEARANCE,
    T_s: float = 1.0,
    L_s: float = 200.0,
) -> tuple[ModelParams, dict]:
    """Full calibration chain: OpsStatistics -> (ModelParams, ramp paths).

    The longest-transit ramp fixes (N, m); every other ramp's path length
    follows from its own transit mean at that shared m.  Returns the ramp
    id -> path length map alongside the parameters.
    """
    if not stats.ramp_taxi_stats:
        raise InfeasibleStatisticsError("no per-ramp taxi statistics available")
    c1, c2 = solve_bernoulli_pair(stats.takeoff_rate_mean, stats.takeoff_rate_std)
    pushback = (stats.pushback_mean, stats.pushback_std)
    ama = {
        ramp: derive_ama_taxi_stats(txo, pushback, clearance)
        for ramp, txo in stats.ramp_taxi_stats.items()
    }
    main = max(ama, key=lambda r: ama[r][0])
    N_main, m = solve_taxiway_params(ama[main][0], ama[main][1], T_s)
    paths = {}
    for ramp, (mean, _) in ama.items():
        n = N_main if ramp == main else max(1, _round_half_up(mean * m / T_s))
        paths[ramp] = n
    B = size_runway_buffer(ama[main][1], clearance[1], stats.takeoff_rate_mean)
    params = ModelParams(L_s=L_s, T_s=T_s * 60.0, m=m, c1=c1, c2=c2, B=max(1, B))
    return params, paths
