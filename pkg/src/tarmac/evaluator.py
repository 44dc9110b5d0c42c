"""Closed-loop policy evaluation: exact stationary analysis, Monte Carlo,
parameter sweeps, and frontier comparison.

A full-state or threshold controller closes the model into a Markov chain,
so its long-run metrics come from the stationary distribution of the
reachable recurrent class.  The most-likely-state agent carries a belief
and is evaluated by simulation only.  All rates are reported per minute
(60 / T_s slots per minute); taxiing counts are aircraft.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from ._simcore import (
    BACKEND,
    mls_kernel,
    obs_arrays,
    policy_arrays,
    sim_arrays,
    table_policy_kernel,
    threshold_kernel,
)
from .errors import (
    CurveAlignmentError,
    EmptyOverlapError,
    MultichainError,
    SolverError,
)
from .optimizer import Policy, build_cost_vector, extract_policy, solve_average_cost
from .policies import ObservationCoder, threshold_decide
from .topology import StateVector, decode_state, encode_state

DEFAULT_STEPS = 1_000_000
DEFAULT_WARMUP = 10_000
DEFAULT_BATCHES = 100
SWEEP_KINDS = ("beta_sweep", "threshold_sweep", "mls_sweep")


@dataclass(frozen=True)
class MetricsReport:
    """Long-run performance of one controller on one model.

    avg_takeoff_rate / rate_std / ramp_release_rates are per minute;
    avg_taxiing is an aircraft count.  Standard errors are batch-means
    estimates for simulated reports and zero for exact ones.
    """

    controller: str
    param: float | None
    avg_takeoff_rate: float
    avg_taxiing: float
    rate_std: float
    ramp_release_rates: tuple[float, ...]
    stderr_rate: float
    stderr_taxiing: float
    steps: int | None
    warmup: int | None
    seed: int | None
    source: str
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.avg_takeoff_rate < -1e-9 or self.avg_taxiing < -1e-9:
            raise SolverError("negative long-run metric")


# ------------------------------------------------------- exact analysis

def _closed_loop_chain(model, policy) -> sp.csr_matrix:
    """Row-stochastic chain obtained by averaging rows over the policy."""
    n = model.n_states
    if policy.probs.shape != (n, model.row_of.shape[1]):
        raise SolverError(
            f"policy table {policy.probs.shape} does not fit model ({n} states)"
        )
    rows, cols, data = [], [], []
    for i in range(n):
        for k in np.nonzero(policy.probs[i] > 0.0)[0]:
            r = model.row_of[i, k]
            if r < 0:
                raise SolverError(f"policy puts mass on infeasible mask {k} in state {i}")
            lo, hi = model.row_ptr[r], model.row_ptr[r + 1]
            rows.append(np.full(hi - lo, i, dtype=np.int64))
            cols.append(model.cols[lo:hi])
            data.append(policy.probs[i, k] * model.probs[lo:hi])
    P = sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    P.sum_duplicates()
    return P


def _recurrent_class(model, P: sp.csr_matrix) -> tuple[np.ndarray, np.ndarray]:
    """(reachable states, recurrent members) from the empty state.

    Raises MultichainError when the reachable set splits into several
    closed communicating classes, naming one state from each.
    """
    start = int(model.position(encode_state(StateVector(0, 0, 0, 0), model.topology)))
    reach = np.sort(csgraph.breadth_first_order(P, start, directed=True, return_predecessors=False))
    sub = P[reach][:, reach].tocsr()
    ncomp, labels = csgraph.connected_components(sub, directed=True, connection="strong")
    coo = sub.tocoo()
    crossing = labels[coo.row] != labels[coo.col]
    open_comps = set(labels[coo.row[crossing]].tolist())
    closed = [c for c in range(ncomp) if c not in open_comps]
    if len(closed) != 1:
        a = int(model.states[reach[np.nonzero(labels == closed[0])[0][0]]])
        b = int(model.states[reach[np.nonzero(labels == closed[1])[0][0]]])
        raise MultichainError(
            f"closed loop has {len(closed)} recurrent classes; "
            f"states {a} and {b} do not communicate"
        )
    return reach, reach[labels == closed[0]]


def _stationary_distribution(P: sp.csr_matrix, members: np.ndarray) -> np.ndarray:
    """Stationary law of the chain restricted to one closed class."""
    m = len(members)
    if m == 1:
        return np.ones(1)
    Pc = P[members][:, members]
    A = (Pc.T - sp.identity(m, format="csr")).tolil()
    A[m - 1, :] = 1.0  # replace one balance row with normalization
    b = np.zeros(m)
    b[-1] = 1.0
    mu = spsolve(A.tocsc(), b)
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()
    residual = np.abs(mu @ Pc - mu).max()
    if residual > 1e-8:
        raise SolverError(f"stationary solve residual {residual:.2e}")
    return mu


def stationary_metrics(model, policy, *, param=None, controller="optimal") -> MetricsReport:
    """Exact long-run metrics of the chain closed by a decision table."""
    P = _closed_loop_chain(model, policy)
    reach, members = _recurrent_class(model, P)
    mu = np.zeros(model.n_states)
    mu[members] = _stationary_distribution(P, members)

    dec = model.decoded()
    count = dec["count"].astype(np.float64)
    n_ramps = model.topology.n_ramps
    rate = 0.0
    rate_sq = 0.0
    ramp = np.zeros(n_ramps)
    for i in members:
        for k in np.nonzero(policy.probs[i] > 0.0)[0]:
            w = mu[i] * policy.probs[i, k]
            r = model.row_of[i, k]
            lo, hi = model.row_ptr[r], model.row_ptr[r + 1]
            pj = model.probs[lo:hi]
            base = count[i] + bin(int(k)).count("1")
            x = base - count[model.cols[lo:hi]]
            rate += w * float(pj @ x)
            rate_sq += w * float(pj @ (x * x))
            for rr in range(n_ramps):
                if (k >> rr) & 1:
                    ramp[rr] += w
    scale = 60.0 / model.topology.params.T_s
    return MetricsReport(
        controller=controller,
        param=param,
        avg_takeoff_rate=float(rate * scale),
        avg_taxiing=float(mu @ count),
        rate_std=math.sqrt(max(rate_sq - rate * rate, 0.0)) * scale,
        ramp_release_rates=tuple(float(v) for v in ramp * scale),
        stderr_rate=0.0,
        stderr_taxiing=0.0,
        steps=None,
        warmup=None,
        seed=None,
        source="stationary",
        extra={"n_reachable": len(reach), "n_recurrent": len(members)},
    )


def threshold_policy(model, Th: int) -> Policy:
    """One-hot decision table of the count-threshold rule.

    A per-state table exists only when the turn is part of the state
    (alternation fairness) or there is a single ramp; otherwise the
    rotating turn is controller memory and the rule must be simulated.
    """
    t = model.topology
    if t.n_ramps > 1 and t.fairness_mode != "alternation":
        raise SolverError(
            "threshold rule with a controller-side turn is not a state policy; simulate it"
        )
    dec = model.decoded()
    probs = np.zeros((model.n_states, model.row_of.shape[1]))
    for i in range(model.n_states):
        s = decode_state(int(model.states[i]), t)
        k = threshold_decide(s, Th, int(dec["turn"][i]) if t.fairness_mode == "alternation" else 0)
        probs[i, k] = 1.0
    return Policy(probs=probs, completed=np.zeros(model.n_states, dtype=bool), completion="threshold")


# ---------------------------------------------------------- Monte Carlo

class PolicyController:
    """Full-state table policy driving the closed loop."""

    label = "optimal"

    def __init__(self, policy, param=None):
        self.policy = policy
        self.param = param

    def run(self, model, rng, steps, warmup, n_batches, start=None):
        sim = sim_arrays(model)
        return table_policy_kernel(
            sim, policy_arrays(self.policy), rng, steps, warmup, n_batches, start=start
        )


class ThresholdController:
    """Count-threshold rule with a rotating (or in-state) turn."""

    label = "threshold"

    def __init__(self, Th):
        self.Th = int(Th)
        self.param = self.Th

    def run(self, model, rng, steps, warmup, n_batches, start=None):
        sim = sim_arrays(model)
        return threshold_kernel(sim, self.Th, rng, steps, warmup, n_batches, start=start)


class MlsController:
    """Most-likely-state agent: full-state policy behind a Bayes filter."""

    label = "mls"

    def __init__(self, policy, scheme, param=None):
        self.policy = policy
        self.scheme = scheme
        self.param = param

    def run(self, model, rng, steps, warmup, n_batches, start=None):
        coder = ObservationCoder(model.topology, self.scheme)
        obs = obs_arrays(coder.table(model))
        return mls_kernel(
            sim_arrays(model), policy_arrays(self.policy), obs, rng, steps, warmup,
            n_batches, start=start,
        )


def simulate(
    controller,
    model,
    steps: int = DEFAULT_STEPS,
    warmup: int = DEFAULT_WARMUP,
    seed=0,
    *,
    n_batches: int = DEFAULT_BATCHES,
    start=None,
) -> MetricsReport:
    """Monte Carlo metrics over steps - warmup measured slots.

    Deterministic given the seed (an int or a Generator); identical
    under both kernel backends.
    """
    if warmup < 0 or steps <= warmup:
        raise ValueError(f"need steps > warmup >= 0, got {steps}, {warmup}")
    measured = steps - warmup
    if measured % n_batches:
        raise ValueError(f"measured steps {measured} not divisible into {n_batches} batches")
    if isinstance(seed, np.random.Generator):
        rng, seed_val = seed, None
    else:
        rng, seed_val = np.random.default_rng(seed), int(seed)
    res = controller.run(model, rng, measured, warmup, n_batches, start)

    per = measured // n_batches
    rate_step = float(res["batch_takeoffs"].sum()) / measured
    taxiing = float(res["batch_count"].sum()) / measured
    if n_batches >= 2:
        se_rate = float((res["batch_takeoffs"] / per).std(ddof=1)) / math.sqrt(n_batches)
        se_taxi = float((res["batch_count"] / per).std(ddof=1)) / math.sqrt(n_batches)
    else:
        se_rate = se_taxi = 0.0
    var = max(res["takeoff_sq"] / measured - rate_step * rate_step, 0.0)
    scale = 60.0 / model.topology.params.T_s
    extra = {"backend": BACKEND, "n_batches": n_batches, "final_state": res["final_state"]}
    for key in ("final_turn", "max_norm_err", "min_truth_mass", "mismatches", "resets"):
        if key in res:
            extra[key] = res[key]
    return MetricsReport(
        controller=controller.label,
        param=controller.param,
        avg_takeoff_rate=rate_step * scale,
        avg_taxiing=taxiing,
        rate_std=math.sqrt(var) * scale,
        ramp_release_rates=tuple(float(v) for v in res["ramp_releases"] / measured * scale),
        stderr_rate=se_rate * scale,
        stderr_taxiing=se_taxi,
        steps=steps,
        warmup=warmup,
        seed=seed_val,
        source="simulation",
        extra=extra,
    )


# -------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepPoint:
    kind: str
    param: float
    report: MetricsReport | None
    error: str | None = None


def _beta_point(model, beta, fairness, completion, rng, steps, warmup, n_batches):
    sol = solve_average_cost(model, build_cost_vector(model, beta), fairness=fairness)
    policy = extract_policy(sol, model=model, completion=completion)
    try:
        return stationary_metrics(model, policy, param=beta)
    except MultichainError as e:
        warnings.warn(f"beta {beta}: {e}; falling back to simulation")
        return simulate(
            PolicyController(policy, param=beta), model, steps, warmup, rng,
            n_batches=n_batches,
        )


def _threshold_point(model, Th, rng, steps, warmup, n_batches):
    t = model.topology
    if t.n_ramps == 1 or t.fairness_mode == "alternation":
        try:
            return stationary_metrics(
                model, threshold_policy(model, Th), param=Th, controller="threshold"
            )
        except MultichainError as e:
            warnings.warn(f"Th {Th}: {e}; falling back to simulation")
    return simulate(ThresholdController(Th), model, steps, warmup, rng, n_batches=n_batches)


def sweep(
    model,
    kind: str,
    grid,
    fairness: str | None = None,
    obs_scheme=None,
    *,
    steps: int = DEFAULT_STEPS,
    warmup: int = DEFAULT_WARMUP,
    n_batches: int = DEFAULT_BATCHES,
    seed: int = 0,
    completion: str = "greedy",
) -> list[SweepPoint]:
    """One MetricsReport per grid value; failures flagged, not raised.

    beta_sweep solves the program per beta and evaluates exactly;
    threshold_sweep evaluates integer thresholds (exactly where the rule
    is a state policy); mls_sweep simulates the belief agent driving the
    beta-indexed optimal policies through obs_scheme.  Every grid point
    owns a child seed stream spawned in grid order, so results do not
    depend on which points simulate.
    """
    grid = list(grid)
    if kind not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")
    if not grid:
        raise ValueError("empty sweep grid")
    if kind == "mls_sweep" and obs_scheme is None:
        raise ValueError("mls_sweep needs an observation scheme")
    children = np.random.SeedSequence(seed).spawn(len(grid))
    points = []
    for param, child in zip(grid, children):
        rng = np.random.default_rng(child)
        try:
            if kind == "beta_sweep":
                report = _beta_point(
                    model, float(param), fairness, completion, rng, steps, warmup, n_batches
                )
            elif kind == "threshold_sweep":
                report = _threshold_point(model, int(param), rng, steps, warmup, n_batches)
            else:
                sol = solve_average_cost(
                    model, build_cost_vector(model, float(param)), fairness=fairness
                )
                policy = extract_policy(sol, model=model, completion=completion)
                report = simulate(
                    MlsController(policy, obs_scheme, param=float(param)),
                    model, steps, warmup, rng, n_batches=n_batches,
                )
            points.append(SweepPoint(kind, float(param), report))
        except Exception as e:  # noqa: BLE001 - flagged per point by contract
            points.append(SweepPoint(kind, float(param), None, f"{type(e).__name__}: {e}"))
    return points


def frontier_table(points: list[SweepPoint]) -> tuple[list[str], list[list]]:
    """Flatten sweep points into CSV-ready columns and rows."""
    n_ramps = max(
        (len(p.report.ramp_release_rates) for p in points if p.report is not None),
        default=0,
    )
    columns = (
        ["kind", "param", "avg_rate", "avg_taxiing", "rate_std"]
        + [f"ramp_release_rate_{r}" for r in range(n_ramps)]
        + ["stderr_rate", "stderr_taxiing", "source", "error"]
    )
    rows = []
    for p in points:
        if p.report is None:
            rows.append([p.kind, p.param] + [""] * (3 + n_ramps + 3) + [p.error])
        else:
            rep = p.report
            rows.append(
                [p.kind, p.param, rep.avg_takeoff_rate, rep.avg_taxiing, rep.rate_std]
                + list(rep.ramp_release_rates)
                + [""] * (n_ramps - len(rep.ramp_release_rates))
                + [rep.stderr_rate, rep.stderr_taxiing, rep.source, ""]
            )
    return columns, rows


# --------------------------------------------------- frontier comparison

@dataclass(frozen=True)
class ReductionCurve:
    """Percent reduction in average taxiing at common take-off rates."""

    rates: np.ndarray
    reductions: np.ndarray

    def __post_init__(self):
        self.rates.setflags(write=False)
        self.reductions.setflags(write=False)


def _frontier_xy(points) -> tuple[np.ndarray, np.ndarray]:
    """Pareto-prune to a strictly increasing rate -> taxiing polyline."""
    pairs = []
    for p in points:
        rep = getattr(p, "report", p)
        if rep is None:
            continue
        if math.isfinite(rep.avg_takeoff_rate) and math.isfinite(rep.avg_taxiing):
            pairs.append((rep.avg_takeoff_rate, rep.avg_taxiing))
    pairs.sort(key=lambda xy: (-xy[0], xy[1]))
    kept = []
    best = math.inf
    for rate, taxi in pairs:  # rate descending: keep the lower envelope
        if taxi < best:
            kept.append((rate, taxi))
            best = taxi
    kept.reverse()
    if len(kept) < 2:
        raise CurveAlignmentError(f"frontier has {len(kept)} usable points; need at least 2")
    xy = np.array(kept)
    return xy[:, 0], xy[:, 1]


def compare_frontiers(optimal, benchmark) -> ReductionCurve:
    """(benchmark - optimal) / benchmark taxiing, percent, on the shared
    rate range, sampled at both frontiers' knots."""
    ox, oy = _frontier_xy(optimal)
    bx, by = _frontier_xy(benchmark)
    lo, hi = max(ox[0], bx[0]), min(ox[-1], bx[-1])
    if lo > hi:
        raise EmptyOverlapError(
            f"rate ranges [{ox[0]:.4f}, {ox[-1]:.4f}] and "
            f"[{bx[0]:.4f}, {bx[-1]:.4f}] do not overlap"
        )
    knots = np.concatenate(([lo, hi], ox[(ox >= lo) & (ox <= hi)], bx[(bx >= lo) & (bx <= hi)]))
    knots = np.unique(knots)
    o_at = np.interp(knots, ox, oy)
    b_at = np.interp(knots, bx, by)
    safe = np.where(b_at > 0.0, b_at, 1.0)
    reductions = np.where(b_at > 0.0, (b_at - o_at) / safe * 100.0, 0.0)
    return ReductionCurve(rates=knots, reductions=reductions)
