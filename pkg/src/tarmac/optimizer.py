"""Average-cost optimization over stationary state-decision probabilities.

The decision problem is a linear program in the variables
y_ik = P(state = i, decision = k) under the stationary law:

    minimize    Z = sum_i sum_k C_i y_ik
    subject to  sum y = 1,  y >= 0
                per state j:  sum_k y_jk - sum_ik y_ik p(j | i, k) = 0
                statistical fairness: per-ramp release mass equal across ramps

The optimal randomized policy releases k in state i with probability
y_ik / sum_k y_ik.  States carrying no stationary mass get a completion
decision; see extract_policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

from .dynamics import TransitionModel
from .errors import SolverError
from .topology import StateVector, count_taxiing, runway_idle_indicator

COMPLETIONS = ("greedy", "hold")


def state_cost(s: StateVector, beta: float) -> float:
    """Per-step cost of one state: taxiing aircraft plus beta when the
    runway queue sits empty."""
    return count_taxiing(s) + beta * runway_idle_indicator(s)


@dataclass(frozen=True)
class CostModel:
    """Cost vector aligned with a model's compact state order."""

    beta: float
    values: np.ndarray

    def __post_init__(self):
        if self.beta < 0:
            raise SolverError(f"beta {self.beta} must be nonnegative")
        self.values.setflags(write=False)


def build_cost_vector(model: TransitionModel, beta: float) -> CostModel:
    """C_i = (taxiing count) + beta * (queue empty) over the model states."""
    dec = model.decoded()
    values = dec["count"].astype(np.float64) + beta * (dec["buf"] == 0)
    return CostModel(beta=float(beta), values=values)


@dataclass(frozen=True)
class StationarySolution:
    """LP solution: stationary mass per state-decision row plus duals.

    y is row-aligned with the model (one entry per feasible (i, k) pair);
    duals carries every equality multiplier in constraint order
    (normalization, balance rows, fairness rows).
    """

    model: TransitionModel
    cost: CostModel
    fairness: str
    y: np.ndarray
    objective: float
    duals: np.ndarray
    balance_residual: float
    fairness_residual: float = 0.0

    def __post_init__(self):
        self.y.setflags(write=False)
        self.duals.setflags(write=False)

    def state_mass(self) -> np.ndarray:
        """sum_k y_ik per compact state."""
        mass = np.zeros(self.model.n_states)
        np.add.at(mass, self.model.row_state, self.y)
        return mass

    def y_map(self) -> dict:
        """{(compact state, decision mask): probability} over the support."""
        out = {}
        for r in np.nonzero(self.y > 0.0)[0]:
            out[(int(self.model.row_state[r]), int(self.model.row_k[r]))] = float(self.y[r])
        return out

    def lp_metrics(self) -> tuple[float, float]:
        """(take-off rate, average taxiing count) predicted by the y
        moments themselves, before any closed-loop evaluation."""
        tm = self.model
        dec = tm.decoded()
        c1, c2 = tm.topology.params.c1, tm.topology.params.c2
        mass = self.state_mass()
        buf = dec["buf"]
        # expected take-offs in a state: E[min(draws, queue)]
        p1 = c1 * (1 - c2) + (1 - c1) * c2
        p2 = c1 * c2
        per_state = np.where(buf >= 2, p1 + 2 * p2, 0.0) + np.where(buf == 1, p1 + p2, 0.0)
        rate = float(mass @ per_state)
        taxiing = float(mass @ dec["count"])
        return rate, taxiing


def _transition_matrix(model: TransitionModel) -> sp.csr_matrix:
    """Row-stochastic (n_rows x n_states) matrix of the frozen rows."""
    n_rows = model.n_rows
    indptr = np.asarray(model.row_ptr, dtype=np.int64)
    return sp.csr_matrix(
        (model.probs, model.cols, indptr), shape=(n_rows, model.n_states)
    )


def _release_mass_matrix(model: TransitionModel) -> sp.csr_matrix:
    """(R x n_rows) indicator: row r of the output marks LP variables whose
    decision mask releases ramp r."""
    R = model.topology.n_ramps
    rows, cols = [], []
    for ramp in range(R):
        sel = np.nonzero((model.row_k & (1 << ramp)) != 0)[0]
        rows.extend([ramp] * len(sel))
        cols.extend(sel.tolist())
    data = np.ones(len(rows))
    return sp.csr_matrix((data, (rows, cols)), shape=(R, model.n_rows))


def _assemble_equalities(model: TransitionModel, fairness: str):
    """A_eq, b_eq for normalization + balance (+ fairness) in that order."""
    n_rows, n_states = model.n_rows, model.n_states
    P = _transition_matrix(model)
    # occupancy: column j picks up every y_jk
    occ = sp.csr_matrix(
        (np.ones(n_rows), (np.arange(n_rows), model.row_state)),
        shape=(n_rows, n_states),
    )
    balance = (occ - P).T.tocsr()
    norm = sp.csr_matrix(np.ones((1, n_rows)))
    blocks = [norm, balance]
    if fairness == "statistical":
        rel = _release_mass_matrix(model)
        R = rel.shape[0]
        if R > 1:
            # ramp 0 minus each other ramp; R-1 rows
            coef = sp.lil_matrix((R - 1, R))
            coef[:, 0] = 1.0
            coef[np.arange(R - 1), np.arange(1, R)] = -1.0
            blocks.append((coef.tocsr() @ rel).tocsr())
    A_eq = sp.vstack(blocks, format="csr")
    b_eq = np.zeros(A_eq.shape[0])
    b_eq[0] = 1.0
    return A_eq, b_eq


METHODS = ("lp", "rvi")
RVI_AUTO_STATES = 5000


def solve_average_cost(
    model: TransitionModel,
    cost: CostModel,
    fairness: str | None = None,
    method: str | None = None,
) -> StationarySolution:
    """Solve the stationary-probability program for one cost vector.

    fairness None defers to the topology (statistical adds the equal-
    release-mass rows; alternation needs none, the dynamics enforce it).

    method "lp" solves the program directly; "rvi" runs relative value
    iteration on the equivalent average-cost optimality equation and
    packages the result in the same shape (y, duals = [gain; bias]).
    Every decision of a state shares one cost, so the LP basis is
    massively degenerate and simplex stalls for minutes on the larger
    instances once the optimal support grows; iteration reaches the same
    optimum in seconds.  None picks lp for small instances and for
    statistical fairness (whose coupling rows only the LP can hold), rvi
    otherwise.
    """
    if fairness is None:
        fairness = model.topology.fairness_mode
    if fairness not in ("none", "alternation", "statistical"):
        raise SolverError(f"unknown fairness mode {fairness!r}")
    if len(cost.values) != model.n_states:
        raise SolverError("cost vector does not match the model state count")
    if method is None:
        method = (
            "lp"
            if fairness == "statistical" or model.n_states <= RVI_AUTO_STATES
            else "rvi"
        )
    if method not in METHODS:
        raise SolverError(f"unknown method {method!r}")
    if method == "rvi":
        if fairness == "statistical":
            raise SolverError(
                "statistical fairness adds coupling rows the optimality "
                "equation cannot express; use method='lp'"
            )
        return _solve_rvi(model, cost, fairness)
    return _solve_lp(model, cost, fairness)


def _solve_lp(
    model: TransitionModel, cost: CostModel, fairness: str
) -> StationarySolution:
    c = cost.values[model.row_state]
    A_eq, b_eq = _assemble_equalities(model, fairness)
    res = linprog(c, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        _diagnose_failure(model, cost, fairness, res)
    y = np.asarray(res.x)
    y[y < 0.0] = 0.0

    total = y.sum()
    if abs(total - 1.0) > 1e-8:
        raise SolverError(f"stationary mass sums to {total}, expected 1")
    resid = np.abs(A_eq[1 : 1 + model.n_states] @ y).max()
    if resid > 1e-8:
        raise SolverError(f"balance residual {resid:.2e} exceeds 1e-8")
    f_resid = 0.0
    if fairness == "statistical" and model.topology.n_ramps > 1:
        f_resid = float(np.abs(A_eq[1 + model.n_states :] @ y).max())
        if f_resid > 1e-8:
            raise SolverError(f"fairness residual {f_resid:.2e} exceeds 1e-8")

    duals = np.asarray(res.eqlin.marginals)
    return StationarySolution(
        model=model,
        cost=cost,
        fairness=fairness,
        y=y,
        objective=float(res.fun),
        duals=duals,
        balance_residual=float(resid),
        fairness_residual=f_resid,
    )


RVI_SPAN_TOL = 1e-10
RVI_MAX_SWEEPS = 200_000
RVI_TAU = 0.5  # damping; turn alternation makes the chain periodic


def _state_row_ptr(model: TransitionModel) -> np.ndarray:
    """Segment boundaries of the rows grouped by compact state."""
    return np.searchsorted(model.row_state, np.arange(model.n_states + 1))


def _greedy_kernel(model, chosen) -> sp.csr_matrix:
    """(n_states x n_states) chain under one chosen row per state."""
    starts = model.row_ptr[chosen]
    lens = model.row_ptr[chosen + 1] - starts
    indptr = np.zeros(model.n_states + 1, dtype=np.int64)
    np.cumsum(lens, out=indptr[1:])
    take = np.repeat(starts - indptr[:-1], lens) + np.arange(indptr[-1])
    return sp.csr_matrix(
        (model.probs[take], model.cols[take], indptr),
        shape=(model.n_states, model.n_states),
    )


def _closed_loop_stationary(Ppi: sp.csr_matrix) -> np.ndarray:
    """Long-run distribution of the greedy chain started empty (state 0).

    The recurrent class the empty state falls into is located by strong
    components; its stationary law solves a linear system exactly.  With
    several absorbing classes the limit is their absorption-weighted
    mixture, reached by damped power iteration instead.
    """
    n = Ppi.shape[0]
    n_comp, labels = csgraph.connected_components(
        Ppi, directed=True, connection="strong"
    )
    reach = csgraph.breadth_first_order(
        Ppi, i_start=0, directed=True, return_predecessors=False
    )
    coo = Ppi.tocoo()
    cross = labels[coo.row] != labels[coo.col]
    open_comp = np.zeros(n_comp, dtype=bool)
    open_comp[labels[coo.row[cross]]] = True
    closed = np.unique(labels[reach])
    closed = closed[~open_comp[closed]]

    if len(closed) == 1:
        S = np.nonzero(labels == closed[0])[0]
        m = len(S)
        Ps = Ppi[S][:, S]
        ones = sp.csr_matrix(np.ones((1, m)))
        balance = (Ps.T - sp.identity(m)).tocsr()[1:]
        A = sp.vstack([ones, balance], format="csc")
        b = np.zeros(m)
        b[0] = 1.0
        pi = spla.spsolve(A, b)
        pi[pi < 0] = 0.0
        pi /= pi.sum()
        mu = np.zeros(n)
        mu[S] = pi
        return mu

    mu = np.zeros(n)
    mu[0] = 1.0
    PT = Ppi.T.tocsr()
    for _ in range(RVI_MAX_SWEEPS):
        step = PT @ mu - mu
        if np.abs(step).max() <= 2e-12:
            break
        mu += RVI_TAU * step
        mu /= mu.sum()
    else:
        raise SolverError(
            "closed-loop stationary distribution did not converge; the "
            "greedy chain mixes too slowly"
        )
    mu[mu < 0] = 0.0
    return mu / mu.sum()


def _solve_rvi(
    model: TransitionModel, cost: CostModel, fairness: str
) -> StationarySolution:
    """Relative value iteration, packaged as a StationarySolution.

    Iterates the damped optimality operator until the span of Th - h
    closes, reads the gain off the midpoint, then rebuilds the stationary
    y of the greedy chain so downstream consumers (metrics, policy
    extraction, reduced costs) see the exact same interface the LP
    produces.  The reachable set is communicating (everything drains to
    empty under hold), so the gain is a constant and any greedy recurrent
    class attains it; the objective cross-check below enforces that.
    """
    c = cost.values[model.row_state]
    n, n_rows = model.n_states, model.n_rows
    ptr = _state_row_ptr(model)
    seg_rows = model.row_ptr[:-1]
    seg_states = ptr[:-1]
    probs, cols, row_state = model.probs, model.cols, model.row_state

    h = np.zeros(n)
    for _ in range(RVI_MAX_SWEEPS):
        q = c + np.add.reduceat(probs * h[cols], seg_rows)
        th = np.minimum.reduceat(q, seg_states)
        delta = th - h
        lo, hi = float(delta.min()), float(delta.max())
        if hi - lo <= RVI_SPAN_TOL:
            break
        h += RVI_TAU * delta
        h -= h[0]
    else:
        raise SolverError(
            f"optimality gap still {hi - lo:.2e} after {RVI_MAX_SWEEPS} "
            "sweeps; the model may not be communicating"
        )
    g = 0.5 * (lo + hi)

    # first row attaining the per-state minimum (exact float match)
    first = np.where(q == th[row_state], np.arange(n_rows), n_rows)
    chosen = np.minimum.reduceat(first, seg_states)
    Ppi = _greedy_kernel(model, chosen)
    mu = _closed_loop_stationary(Ppi)

    y = np.zeros(n_rows)
    y[chosen] = mu
    objective = float(y @ c)
    if abs(objective - g) > 1e-7 * max(1.0, abs(g)):
        raise SolverError(
            f"greedy chain achieves {objective:.9f} but the optimality "
            f"equation gain is {g:.9f}; the iterate's recurrent class "
            "misses the optimum"
        )
    resid = float(np.abs(Ppi.T @ mu - mu).max())
    if resid > 1e-8:
        raise SolverError(f"balance residual {resid:.2e} exceeds 1e-8")
    duals = np.concatenate([[g], h])
    return StationarySolution(
        model=model,
        cost=cost,
        fairness=fairness,
        y=y,
        objective=objective,
        duals=duals,
        balance_residual=resid,
        fairness_residual=0.0,
    )


def _diagnose_failure(model, cost, fairness, res):
    """Name the constraint class behind an LP failure."""
    if res.status == 2 and fairness == "statistical":
        try:
            solve_average_cost(model, cost, fairness="none")
        except SolverError:
            pass
        else:
            raise SolverError(
                "infeasible: statistical-fairness rows (equal per-ramp release "
                "mass) cannot be met; balance and normalization alone are feasible"
            )
    if res.status == 2:
        raise SolverError(
            "infeasible: no stationary distribution satisfies the balance rows; "
            "the transition model is inconsistent"
        )
    raise SolverError(f"LP solver failure (status {res.status}): {res.message}")


@dataclass(frozen=True)
class Policy:
    """Randomized stationary policy on the compact state space.

    probs[i, k] is the probability of release mask k in state i; rows sum
    to 1 and respect feasibility.  completed flags states whose decision
    came from the completion rule rather than the LP support.
    """

    probs: np.ndarray
    completed: np.ndarray
    completion: str

    def __post_init__(self):
        self.probs.setflags(write=False)
        self.completed.setflags(write=False)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def K(self) -> int:
        return self.probs.shape[1]

    def decision_at(self, i: int, rng) -> int:
        """Sample a release mask for compact state i."""
        row = self.probs[i]
        u = rng.random()
        acc = 0.0
        for k in range(self.K):
            acc += row[k]
            if u < acc:
                return k
        return int(np.nonzero(row)[0][-1])

    def support(self, i: int) -> np.ndarray:
        return np.nonzero(self.probs[i] > 0.0)[0]

    def deterministic_masks(self) -> np.ndarray:
        """argmax decision per state (ties to the lowest mask)."""
        return np.argmax(self.probs, axis=1).astype(np.int32)


def _reduced_costs(sol: StationarySolution) -> np.ndarray:
    """Per-row reduced costs, oriented so the LP support sits at zero and
    everything else is nonnegative.

    The dual sign convention of the backend is not part of its contract,
    so both orientations are scored against complementary slackness on the
    support and the consistent one is kept.
    """
    model = sol.model
    c = sol.cost.values[model.row_state]
    A_eq, _ = _assemble_equalities(model, sol.fairness)
    red_plus = c - A_eq.T @ sol.duals
    red_minus = c + A_eq.T @ sol.duals

    def violation(red):
        # support rows should sit at zero, others at >= 0
        on = np.abs(red[sol.y > 1e-12]).max() if (sol.y > 1e-12).any() else 0.0
        off = max(0.0, -(red.min()))
        return max(on, off)

    return red_plus if violation(red_plus) <= violation(red_minus) else red_minus


def extract_policy(
    sol: StationarySolution, model: TransitionModel | None = None, completion: str = "greedy"
) -> Policy:
    """Normalize y into per-state decision probabilities.

    States with zero stationary mass (unvisited under the optimal chain)
    still need decisions for closed-loop use:

      greedy  pick the feasible mask with the smallest reduced cost from
              the LP duals among those that step toward the optimal class
              with positive probability, so the closed loop reaches the
              LP's stationary behavior from any start (default)
      hold    release nothing everywhere off the support
    """
    if model is None:
        model = sol.model
    if completion not in COMPLETIONS:
        raise SolverError(f"unknown completion rule {completion!r}")
    n, K = model.n_states, model.K
    probs = np.zeros((n, K))
    np.add.at(probs, (model.row_state, model.row_k), sol.y)
    mass = probs.sum(axis=1)
    covered = mass > 0.0
    probs[covered] /= mass[covered, None]

    completed = ~covered
    if completion == "hold":
        probs[completed, 0] = 1.0
    else:
        red = _reduced_costs(sol)
        # complementary slackness says nothing off the support, so the plain
        # reduced-cost argmin can close a cheap side cycle that never rejoins
        # the optimal class.  steer instead: wave by wave, give each
        # completed state the cheapest decision with a positive-probability
        # step toward the states already reaching the class.
        reached = covered.copy()
        todo = np.nonzero(completed)[0]
        while todo.size:
            hit = np.maximum.reduceat(reached[model.cols], model.row_ptr[:-1])
            assigned = np.zeros(len(todo), dtype=bool)
            for t, i in enumerate(todo):
                ks = np.nonzero(model.row_of[i] >= 0)[0]
                rows = model.row_of[i, ks]
                ok = hit[rows]
                if not ok.any():
                    continue
                probs[i, ks[ok][int(np.argmin(red[rows[ok]]))]] = 1.0
                assigned[t] = True
            if not assigned.any():
                break
            reached[todo[assigned]] = True
            todo = todo[~assigned]
        for i in todo:  # no decision reaches the class; keep the plain argmin
            ks = np.nonzero(model.row_of[i] >= 0)[0]
            probs[i, ks[int(np.argmin(red[model.row_of[i, ks]]))]] = 1.0
    return Policy(probs=probs, completed=completed, completion=completion)
