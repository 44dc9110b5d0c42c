"""Controllers and the partial-information machinery behind them.

Three ways to pick a release mask each step:

  threshold_decide   count-threshold benchmark, one aircraft at a time,
                     rotating through the ramps
  Policy             full-state feedback (optimizer.extract_policy)
  mls_decide         partial information: run a Bayes filter over the
                     compact state space, act as the full-state policy
                     would at the most likely state

The observation model reports, per scheme: one aggregate count of the
unlisted cells plus the runway queue, a count per declared zone, one
occupancy bit per listed spot-adjacent cell, the control-point bits, and
the turn under alternation fairness.  Components concatenate into a
single index most-significant-first with widths ceil(log2(max + 1)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import TransitionModel
from .errors import BeliefResetError, EncodingError
from .topology import (
    AirportTopology,
    ObservationScheme,
    StateVector,
    count_taxiing,
    decode_state,
)


def threshold_decide(s: StateVector, Th: int, turn: int) -> int:
    """Count-threshold benchmark: hold everything while more than Th
    aircraft are taxiing, otherwise release the turn ramp if its spot is
    free.  At most one release per step."""
    if count_taxiing(s) > Th:
        return 0
    if (s.control_points >> turn) & 1:
        return 0
    return 1 << turn


# --------------------------------------------------------- observations

class ObservationCoder:
    """Deterministic state -> observation map for one scheme.

    Component order: [remainder count][zone counts][spot-cell bits]
    [control-point bits][turn].  The remainder covers every cell in no
    zone and no spot list, plus the runway queue.  Zero-width components
    (nothing to encode) are dropped from the index arithmetic.
    """

    def __init__(self, t: AirportTopology, scheme: ObservationScheme | str):
        if isinstance(scheme, str):
            try:
                scheme = t.observation_schemes[scheme]
            except KeyError:
                raise EncodingError(
                    f"topology {t.name!r} declares no observation scheme "
                    f"{scheme!r}; has {sorted(t.observation_schemes)}"
                ) from None
        listed = set(scheme.spot_cells)
        for zone in scheme.zones:
            listed.update(zone)
        self.topology = t
        self.scheme = scheme
        self.remainder_cells = tuple(
            c for c in range(t.n_cells) if c not in listed
        )
        caps = [len(self.remainder_cells) + t.params.B]
        caps += [len(z) for z in scheme.zones]
        caps += [1] * len(scheme.spot_cells)
        caps += [1] * t.n_ramps
        if t.fairness_mode == "alternation":
            caps.append(t.n_ramps - 1)
        self.capacities = tuple(caps)
        self.widths = tuple(c.bit_length() for c in caps)
        self.index_bits = sum(self.widths)

    @property
    def n_components(self) -> int:
        return len(self.capacities)

    def components(self, s: StateVector) -> tuple[int, ...]:
        t = self.topology
        rem = s.buffer_count + sum((s.taxiway >> c) & 1 for c in self.remainder_cells)
        out = [rem]
        for zone in self.scheme.zones:
            out.append(sum((s.taxiway >> c) & 1 for c in zone))
        for c in self.scheme.spot_cells:
            out.append((s.taxiway >> c) & 1)
        for r in range(t.n_ramps):
            out.append((s.control_points >> r) & 1)
        if t.fairness_mode == "alternation":
            out.append(s.turn)
        return tuple(out)

    def index(self, o) -> int:
        if len(o) != len(self.capacities):
            raise EncodingError(
                f"observation has {len(o)} components, scheme "
                f"{self.scheme.name!r} expects {len(self.capacities)}"
            )
        idx = 0
        for v, cap, w in zip(o, self.capacities, self.widths):
            if not 0 <= v <= cap:
                raise EncodingError(f"observation component {v} outside [0, {cap}]")
            idx = (idx << w) | int(v)
        return idx

    def index_of_state(self, s: StateVector) -> int:
        return self.index(self.components(s))

    def table(self, model: TransitionModel) -> np.ndarray:
        """Observation index per compact model state."""
        t = self.topology
        out = np.empty(model.n_states, dtype=np.int64)
        for i, enc in enumerate(model.states):
            out[i] = self.index_of_state(decode_state(int(enc), t))
        return out


def observe(s: StateVector, t: AirportTopology, scheme) -> tuple[int, ...]:
    """Observation vector of s under the scheme (name or object)."""
    return ObservationCoder(t, scheme).components(s)


def observation_index(o, t: AirportTopology, scheme) -> int:
    """Integer index of one observation vector, MSB-first concatenation."""
    return ObservationCoder(t, scheme).index(o)


# --------------------------------------------------------------- belief

@dataclass(frozen=True)
class Belief:
    """Probability per compact model state."""

    probs: np.ndarray

    def __post_init__(self):
        p = self.probs
        if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("belief must be a nonnegative vector summing to 1")
        p.setflags(write=False)

    @classmethod
    def point_mass(cls, n: int, i: int) -> "Belief":
        p = np.zeros(n)
        p[i] = 1.0
        return cls(p)

    def most_likely(self) -> int:
        """argmax state, ties to the lowest compact index."""
        return int(np.argmax(self.probs))


def uniform_over_observation(o_index: int, table: np.ndarray) -> Belief:
    """Reset belief: uniform over the states consistent with o."""
    sel = np.nonzero(table == o_index)[0]
    if len(sel) == 0:
        raise BeliefResetError(f"no state produces observation index {o_index}")
    p = np.zeros(len(table))
    p[sel] = 1.0 / len(sel)
    return Belief(p)


def belief_update(
    b: Belief, k: int, o_index: int, model: TransitionModel, table: np.ndarray
) -> Belief:
    """One Bayes step: push b through the executed decision k, then condition
    on the (deterministic) observation.

    Support states where k is infeasible propagate through their no-release
    row.  A zero normalizer raises BeliefResetError; callers reinitialize
    with uniform_over_observation.
    """
    pred = np.zeros(model.n_states)
    for i in np.nonzero(b.probs > 0.0)[0]:
        r = model.row_of[i, k]
        if r < 0:
            r = model.row_of[i, 0]
        lo, hi = model.row_ptr[r], model.row_ptr[r + 1]
        pred[model.cols[lo:hi]] += b.probs[i] * model.probs[lo:hi]
    sel = np.nonzero(table == o_index)[0]
    w = pred[sel]
    denom = w.sum()
    if denom <= 0.0:
        raise BeliefResetError(
            f"observation index {o_index} has zero probability under the "
            "predicted belief"
        )
    out = np.zeros(model.n_states)
    out[sel] = w / denom
    return Belief(out)


def mls_decide(b: Belief, policy, rng) -> int:
    """Act as the full-state policy would at the most likely state."""
    return policy.decision_at(b.most_likely(), rng)
