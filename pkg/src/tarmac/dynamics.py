"""One-step surface dynamics and the reachable transition model.

Within one sampling period the sub-transitions apply in a fixed order:

  1. take-offs: two independent runway slots fire with probabilities c1, c2;
     min(draw, queue) aircraft leave the queue
  2. taxiway roll, front to back: an aircraft advances into its successor
     with probability m when that successor is free at its processing turn
     (so a whole convoy can advance in one step); the front cell feeds the
     queue only while the queue is below B
  3. spot entry: a cleared aircraft still standing at its control point
     enters the ramp's entry cell with probability m if the cell is free
     after the roll pass (main-line traffic therefore has merge priority;
     the coin_flip tie-break randomizes that contention instead)
  4. the release decision sets the chosen control-point bits
  5. under alternation, a release of the turn ramp passes the turn on

Take-offs per step never exceed two and aircraft are conserved up to
releases and take-offs.

Two joint laws for the m-gated moves are supported, selected by the
topology's motion_draws field.  Every aircraft sees the same marginal
move probability m under both; they differ in correlation only:

  synchronized  one Bernoulli(m) tick per step drives the roll pass and
                the spot entries together (all movable aircraft advance,
                or nobody does).  Rows stay small, about five successors
                each, which is the scale the reference throughput model
                reports.  Shipped default.
  independent   every aircraft draws its own Bernoulli(m).  Rows carry
                every move subset, tens of successors each.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import InfeasibleDecisionError, StateSpaceCapError
from .topology import (
    AirportTopology,
    StateVector,
    count_taxiing,
    decode_state,
    encode_state,
    feasible_decisions,
)

_CACHE_MAGIC = b"TMAC"
_CACHE_VERSION = 1


def _takeoff_outcomes(buf: int, c1: float, c2: float):
    """(aircraft removed, probability) pairs; draws above the queue level
    collapse onto it."""
    if buf == 0:
        return ((0, 1.0),)
    p0 = (1.0 - c1) * (1.0 - c2)
    p1 = c1 * (1.0 - c2) + (1.0 - c1) * c2
    p2 = c1 * c2
    if buf == 1:
        out = ((0, p0), (1, p1 + p2))
    else:
        out = ((0, p0), (1, p1), (2, p2))
    return tuple(o for o in out if o[1] > 0.0)


def _enumerate_step(t: AirportTopology, cp: int, mask: int, buf: int, turn: int, k: int):
    """All successor tuples (cp, mask, buf, turn) with probabilities.

    Operates on raw field integers; the public wrapper deals in StateVector.
    """
    m = t.params.m
    B = t.B
    order = t.processing_order()
    succ = t.successor
    entries = t.entry_cell
    coin = t.merge_tiebreak == "coin_flip"
    results = {}

    def finish(cp_f, mask_f, buf_f, prob):
        cp_f |= k
        turn_f = turn
        if t.fairness_mode == "alternation" and k == (1 << turn):
            turn_f = (turn + 1) % t.n_ramps
        key = (cp_f, mask_f, buf_f, turn_f)
        results[key] = results.get(key, 0.0) + prob

    def sync_tick(cp0, mask0, buf0):
        """Configurations after one successful motion tick: every movable
        aircraft advances.  Weights (summing to 1) split only at coin_flip
        merges."""
        configs = [(cp0, mask0, buf0, 1.0, 0)]
        for c in order:
            if not (mask0 >> c & 1):     # acts only on original occupants
                continue
            s = succ[c]
            nxt = []
            for cpb, mb, bb, wb, hb in configs:
                if s == -1:
                    if bb < B:
                        nxt.append((cpb, mb & ~(1 << c), bb + 1, wb, hb))
                    else:
                        nxt.append((cpb, mb, bb, wb, hb))
                    continue
                if mb >> s & 1:          # successor still occupied: blocked
                    nxt.append((cpb, mb, bb, wb, hb))
                    continue
                contender = -1
                if coin:
                    for r in range(t.n_ramps):
                        if entries[r] == s and (cpb >> r & 1) and not (hb >> r & 1):
                            contender = r
                            break
                if contender >= 0:
                    h = hb | (1 << contender)
                    nxt.append((cpb, mb & ~(1 << c) | (1 << s), bb, wb * 0.5, h))
                    nxt.append((cpb & ~(1 << contender), mb | (1 << s), bb, wb * 0.5, h))
                else:
                    nxt.append((cpb, mb & ~(1 << c) | (1 << s), bb, wb, hb))
            configs = nxt
        out = []
        for cpb, mb, bb, wb, hb in configs:
            for r in range(t.n_ramps):
                if (cpb >> r & 1) and not (hb >> r & 1) and not (mb >> entries[r] & 1):
                    cpb &= ~(1 << r)
                    mb |= 1 << entries[r]
            out.append((cpb, mb, bb, wb))
        return out

    if t.motion_draws == "synchronized":
        for removed, p_t in _takeoff_outcomes(buf, t.params.c1, t.params.c2):
            buf_a = buf - removed
            if m > 0.0:
                for cp_f, mask_f, buf_f, w in sync_tick(cp, mask, buf_a):
                    finish(cp_f, mask_f, buf_f, p_t * m * w)
            if m < 1.0:
                finish(cp, mask, buf_a, p_t * (1.0 - m))
        return results

    def spot_pass(cp_now, mask_now, buf_now, prob, handled):
        # ramps in index order; only relevant when two spots share a cell
        branches = [(cp_now, mask_now, prob)]
        for r in range(t.n_ramps):
            if handled >> r & 1 or not (cp_now >> r & 1):
                continue
            e = entries[r]
            nxt = []
            for cpb, mb, pb in branches:
                if mb >> e & 1:
                    nxt.append((cpb, mb, pb))
                else:
                    if m > 0.0:
                        nxt.append((cpb & ~(1 << r), mb | (1 << e), pb * m))
                    if m < 1.0:
                        nxt.append((cpb, mb, pb * (1.0 - m)))
            branches = nxt
        for cpb, mb, pb in branches:
            finish(cpb, mb, buf_now, pb)

    def roll(idx, cp_now, mask_now, buf_now, prob, handled):
        if idx == len(order):
            spot_pass(cp_now, mask_now, buf_now, prob, handled)
            return
        c = order[idx]
        if not (mask >> c & 1):          # acts only on original occupants
            roll(idx + 1, cp_now, mask_now, buf_now, prob, handled)
            return
        s = succ[c]
        if s == -1:
            if buf_now < B:
                if m > 0.0:
                    roll(idx + 1, cp_now, mask_now & ~(1 << c), buf_now + 1, prob * m, handled)
                if m < 1.0:
                    roll(idx + 1, cp_now, mask_now, buf_now, prob * (1.0 - m), handled)
            else:
                roll(idx + 1, cp_now, mask_now, buf_now, prob, handled)
            return
        if mask_now >> s & 1:            # successor still occupied: blocked
            roll(idx + 1, cp_now, mask_now, buf_now, prob, handled)
            return
        contender = -1
        if coin:
            for r in range(t.n_ramps):
                if entries[r] == s and (cp_now >> r & 1) and not (handled >> r & 1):
                    contender = r
                    break
        if contender >= 0:
            h = handled | (1 << contender)
            # joint intents: main wins outright or by coin, likewise the spot
            p_main = m * (1.0 - m) + m * m * 0.5
            p_spot = p_main
            p_none = (1.0 - m) * (1.0 - m)
            if p_main > 0.0:
                roll(idx + 1, cp_now, mask_now & ~(1 << c) | (1 << s), buf_now, prob * p_main, h)
            if p_spot > 0.0:
                roll(idx + 1, cp_now & ~(1 << contender), mask_now | (1 << s), buf_now, prob * p_spot, h)
            if p_none > 0.0:
                roll(idx + 1, cp_now, mask_now, buf_now, prob * p_none, h)
            return
        if m > 0.0:
            roll(idx + 1, cp_now, mask_now & ~(1 << c) | (1 << s), buf_now, prob * m, handled)
        if m < 1.0:
            roll(idx + 1, cp_now, mask_now, buf_now, prob * (1.0 - m), handled)

    for removed, p_t in _takeoff_outcomes(buf, t.params.c1, t.params.c2):
        roll(0, cp, mask, buf - removed, p_t, 0)
    return results


def step_distribution(s: StateVector, k: int, t: AirportTopology) -> dict:
    """Sparse next-state law {StateVector: probability} for decision mask k.

    Raises InfeasibleDecisionError when k is not allowed in s.
    """
    if k not in feasible_decisions(s, t):
        raise InfeasibleDecisionError(f"decision mask 0b{k:b} infeasible in {s}")
    raw = _enumerate_step(t, s.control_points, s.taxiway, s.buffer_count, s.turn, k)
    return {StateVector(*key): p for key, p in raw.items()}


def sample_step(s: StateVector, k: int, t: AirportTopology, rng) -> StateVector:
    """Draw one successor of (s, k).  rng is a numpy Generator or a seed.

    One uniform variate is consumed per call; the cumulative row is walked
    in ascending successor-index order, so draws are reproducible.
    """
    if not hasattr(rng, "random"):
        rng = np.random.default_rng(rng)
    dist = step_distribution(s, k, t)
    items = sorted(dist.items(), key=lambda kv: encode_state(kv[0], t))
    u = rng.random()
    acc = 0.0
    for sv, p in items:
        acc += p
        if u < acc:
            return sv
    return items[-1][0]


class TransitionModel:
    """Reachable states and their per-decision successor rows, frozen into
    flat arrays.

    states        sorted encoded indices of the reachable set
    row_of[i, k]  row id for compact state i under mask k, -1 if infeasible
    row_ptr/cols/probs   CSR-style storage, cols hold compact state ids
    """

    def __init__(self, topology, states, row_of, row_ptr, cols, probs, row_state, row_k):
        self.topology = topology
        self.states = states
        self.row_of = row_of
        self.row_ptr = row_ptr
        self.cols = cols
        self.probs = probs
        self.row_state = row_state
        self.row_k = row_k
        for a in (states, row_of, row_ptr, cols, probs, row_state, row_k):
            a.setflags(write=False)
        self._pos = None
        self._decoded = None

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_rows(self) -> int:
        return len(self.row_state)

    @property
    def nnz(self) -> int:
        return len(self.cols)

    @property
    def K(self) -> int:
        return self.row_of.shape[1]

    def position(self, encoded: int) -> int:
        """Compact id of an encoded state index."""
        if self._pos is None:
            self._pos = {int(s): i for i, s in enumerate(self.states)}
        return self._pos[int(encoded)]

    def decoded(self):
        """Per-state field arrays (cp, taxi mask, buffer, turn, count)."""
        if self._decoded is None:
            t = self.topology
            n = self.n_states
            cp = np.zeros(n, np.int32)
            mask = np.zeros(n, np.int64)
            buf = np.zeros(n, np.int32)
            turn = np.zeros(n, np.int32)
            cnt = np.zeros(n, np.int32)
            for i, enc in enumerate(self.states):
                sv = decode_state(int(enc), t)
                cp[i] = sv.control_points
                mask[i] = sv.taxiway
                buf[i] = sv.buffer_count
                turn[i] = sv.turn
                cnt[i] = count_taxiing(sv)
            self._decoded = {"cp": cp, "mask": mask, "buf": buf, "turn": turn, "count": cnt}
            for a in self._decoded.values():
                a.setflags(write=False)
        return self._decoded

    def row(self, i: int, k: int):
        """(compact successor ids, probabilities) of one state-decision row."""
        r = self.row_of[i, k]
        if r < 0:
            raise InfeasibleDecisionError(f"mask 0b{k:b} infeasible in compact state {i}")
        lo, hi = self.row_ptr[r], self.row_ptr[r + 1]
        return self.cols[lo:hi], self.probs[lo:hi]

    def feasible_masks(self, i: int):
        return np.nonzero(self.row_of[i] >= 0)[0]

    # --- binary cache ----------------------------------------------------
    #
    # Layout (little endian):
    #   0   4s   magic "TMAC"
    #   4   u32  version (1)
    #   8   u64  state count
    #   16  u64  decision space size (2^R)
    #   24  u64  nonzero count
    #   32  ...  nonzero records, 28 bytes each, sorted by (i, k):
    #            u64 encoded source state, u32 decision mask,
    #            u64 encoded successor state, f64 probability

    def save(self, path):
        t = self.topology
        enc = self.states
        with open(path, "wb") as f:
            f.write(_CACHE_MAGIC)
            f.write(struct.pack("<I", _CACHE_VERSION))
            f.write(struct.pack("<QQQ", self.n_states, self.K, self.nnz))
            rec = np.empty(self.nnz, dtype=[("i", "<u8"), ("k", "<u4"), ("j", "<u8"), ("p", "<f8")])
            for r in range(self.n_rows):
                lo, hi = self.row_ptr[r], self.row_ptr[r + 1]
                rec["i"][lo:hi] = enc[self.row_state[r]]
                rec["k"][lo:hi] = self.row_k[r]
                rec["j"][lo:hi] = enc[self.cols[lo:hi]]
                rec["p"][lo:hi] = self.probs[lo:hi]
            f.write(rec.tobytes())

    @classmethod
    def load(cls, path, topology) -> "TransitionModel":
        with open(path, "rb") as f:
            if f.read(4) != _CACHE_MAGIC:
                raise ValueError(f"{path}: not a transition cache")
            (ver,) = struct.unpack("<I", f.read(4))
            if ver != _CACHE_VERSION:
                raise ValueError(f"{path}: unsupported cache version {ver}")
            n_states, K, nnz = struct.unpack("<QQQ", f.read(24))
            rec = np.frombuffer(
                f.read(nnz * 28),
                dtype=[("i", "<u8"), ("k", "<u4"), ("j", "<u8"), ("p", "<f8")],
                count=nnz,
            )
        states = np.unique(rec["i"]).astype(np.int64)
        if len(states) != n_states:
            raise ValueError(f"{path}: header/state mismatch")
        pos = {int(s): i for i, s in enumerate(states)}
        row_of = np.full((n_states, int(K)), -1, np.int32)
        src = np.array([pos[int(v)] for v in rec["i"]], np.int32)
        dst = np.array([pos[int(v)] for v in rec["j"]], np.int32)
        ks = rec["k"].astype(np.int32)
        # records are stored row-contiguous; recover the row boundaries
        boundary = np.nonzero((src[1:] != src[:-1]) | (ks[1:] != ks[:-1]))[0] + 1
        starts = np.concatenate(([0], boundary, [nnz])).astype(np.int64)
        n_rows = len(starts) - 1
        row_ptr = starts
        row_state = np.empty(n_rows, np.int32)
        row_k = np.empty(n_rows, np.int16)
        for r in range(n_rows):
            lo = starts[r]
            row_state[r] = src[lo]
            row_k[r] = ks[lo]
            row_of[src[lo], ks[lo]] = r
        return cls(topology, states, row_of, row_ptr, dst, rec["p"].astype(np.float64),
                   row_state, row_k)


def build_transition_model(t: AirportTopology, *, max_states: int = 2_000_000) -> TransitionModel:
    """Enumerate every state reachable from the empty surface under all
    decision sequences and freeze the nonzero transition rows.

    Raises StateSpaceCapError when the closure exceeds max_states.
    """
    R = t.n_ramps
    K = 1 << R
    empty = (0, 0, 0, 0)
    seen = {empty}
    frontier = [empty]
    rows = {}                        # (state tuple, k) -> dict successor -> p
    while frontier:
        nxt = []
        for st in frontier:
            cp, mask, buf, turn = st
            sv = StateVector(cp, mask, buf, turn)
            for k in feasible_decisions(sv, t):
                out = _enumerate_step(t, cp, mask, buf, turn, k)
                rows[(st, k)] = out
                for j in out:
                    if j not in seen:
                        seen.add(j)
                        nxt.append(j)
            if len(seen) > max_states:
                raise StateSpaceCapError(
                    f"reachable state space exceeds cap of {max_states} states")
        frontier = nxt

    def enc(st):
        return encode_state(StateVector(*st), t)

    ordered = sorted(seen, key=enc)
    states = np.array([enc(st) for st in ordered], np.int64)
    pos = {st: i for i, st in enumerate(ordered)}

    row_keys = sorted(rows.keys(), key=lambda ik: (pos[ik[0]], ik[1]))
    n_rows = len(row_keys)
    row_of = np.full((len(ordered), K), -1, np.int32)
    row_state = np.empty(n_rows, np.int32)
    row_k = np.empty(n_rows, np.int16)
    row_ptr = np.zeros(n_rows + 1, np.int64)
    cols_parts = []
    probs_parts = []
    for r, (st, k) in enumerate(row_keys):
        out = rows[(st, k)]
        items = sorted((pos[j], p) for j, p in out.items())
        total = sum(p for _, p in items)
        if abs(total - 1.0) > 1e-9:
            raise AssertionError(f"row {(st, k)} sums to {total}")
        row_of[pos[st], k] = r
        row_state[r] = pos[st]
        row_k[r] = k
        row_ptr[r + 1] = row_ptr[r] + len(items)
        cols_parts.append(np.fromiter((j for j, _ in items), np.int32, len(items)))
        probs_parts.append(np.fromiter((p for _, p in items), np.float64, len(items)))
    cols = np.concatenate(cols_parts) if cols_parts else np.zeros(0, np.int32)
    probs = np.concatenate(probs_parts) if probs_parts else np.zeros(0, np.float64)
    return TransitionModel(t, states, row_of, row_ptr, cols, probs, row_state, row_k)


def default_cache_dir() -> str:
    env = os.environ.get("TARMAC_CACHE_DIR")
    if env:
        return env
    return os.path.join(os.path.expanduser("~"), ".cache", "tarmac")


def cached_transition_model(t: AirportTopology, cfg_hash: str, *,
                            max_states: int = 2_000_000) -> TransitionModel:
    """Build the model or load it from the content-addressed cache."""
    d = default_cache_dir()
    path = os.path.join(d, f"{cfg_hash}.tmc")
    if os.path.exists(path):
        return TransitionModel.load(path, t)
    model = build_transition_model(t, max_states=max_states)
    try:
        os.makedirs(d, exist_ok=True)
        tmp = path + f".tmp{os.getpid()}"
        model.save(tmp)
        os.replace(tmp, path)
    except OSError:
        pass
    return model
