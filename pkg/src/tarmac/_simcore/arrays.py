"""Flat array views consumed by both simulation backends.

Everything a closed-loop kernel touches per step is packed into
C-contiguous numpy arrays here, so the compiled and the pure-Python
kernels run from identical inputs.  Take-offs are recovered per step by
aircraft conservation:

    takeoffs = count(i) + popcount(k_executed) - count(i')

which avoids carrying a per-transition take-off table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dynamics import TransitionModel
from ..topology import StateVector, encode_state


@dataclass(frozen=True)
class SimArrays:
    """Per-model state tables shared by every kernel."""

    n_states: int
    K: int
    n_ramps: int
    alternation: bool
    start: int                  # compact index of the empty state
    row_of: np.ndarray          # (n, K) int64, -1 where infeasible
    row_ptr: np.ndarray         # int64
    cols: np.ndarray            # int64
    probs: np.ndarray           # float64
    count: np.ndarray           # int32 taxiing count per state
    cp: np.ndarray              # int32 control-point bits per state
    buf: np.ndarray             # int32 queue length per state
    turn: np.ndarray            # int32 turn per state (0 outside alternation)
    popk: np.ndarray            # int32 popcount per decision mask


def _c(a, dtype):
    # fresh writable copies: the model's own arrays are frozen, and the
    # compiled kernels take plain (non-const) memoryviews
    return np.array(a, dtype=dtype, order="C", copy=True)


def sim_arrays(model: TransitionModel) -> SimArrays:
    t = model.topology
    dec = model.decoded()
    start = int(model.position(encode_state(StateVector(0, 0, 0, 0), t)))
    popk = np.array([bin(k).count("1") for k in range(model.K)], dtype=np.int32)
    return SimArrays(
        n_states=model.n_states,
        K=model.K,
        n_ramps=t.n_ramps,
        alternation=t.fairness_mode == "alternation",
        start=start,
        row_of=_c(model.row_of, np.int64),
        row_ptr=_c(model.row_ptr, np.int64),
        cols=_c(model.cols, np.int64),
        probs=_c(model.probs, np.float64),
        count=_c(dec["count"], np.int32),
        cp=_c(dec["cp"], np.int32),
        buf=_c(dec["buf"], np.int32),
        turn=_c(dec["turn"], np.int32),
        popk=popk,
    )


@dataclass(frozen=True)
class ObsArrays:
    """Observation-equivalence structure for the belief filter.

    Raw observation indices are compressed to dense ids; bucket_states
    lists the compact states of each id contiguously in ascending state
    order (bucket_ptr delimits them), which is what the conditioning
    step iterates.
    """

    n_obs: int
    obs_id: np.ndarray          # (n,) int64 dense observation id per state
    bucket_ptr: np.ndarray      # (n_obs + 1,) int64
    bucket_states: np.ndarray   # (n,) int64


def obs_arrays(table: np.ndarray) -> ObsArrays:
    uniq, obs_id = np.unique(table, return_inverse=True)
    order = np.argsort(obs_id, kind="stable")
    counts = np.bincount(obs_id, minlength=len(uniq))
    ptr = np.zeros(len(uniq) + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ObsArrays(
        n_obs=len(uniq),
        obs_id=_c(obs_id, np.int64),
        bucket_ptr=ptr,
        bucket_states=_c(order, np.int64),
    )


def policy_arrays(policy) -> np.ndarray:
    """(n, K) float64 decision law, rows summing to 1."""
    probs = _c(policy.probs, np.float64)
    if probs.ndim != 2:
        raise ValueError("policy table must be 2-d")
    return probs
