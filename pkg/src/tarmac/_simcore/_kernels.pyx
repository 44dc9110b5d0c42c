# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled closed-loop kernels.

Same loops as kernels_py, draw for draw and add for add: uniforms come
from the caller's numpy Generator through its BitGenerator capsule, so a
given seed yields the identical trajectory under either backend.
"""

from cpython.pycapsule cimport PyCapsule_GetPointer, PyCapsule_IsValid
from numpy.random cimport bitgen_t

import numpy as np


cdef bitgen_t *_bg(object rng) except NULL:
    capsule = rng.bit_generator.capsule
    if not PyCapsule_IsValid(capsule, "BitGenerator"):
        raise ValueError("rng must be a numpy Generator")
    return <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")


cdef long long _check_batches(long long steps, long long n_batches) except -1:
    if n_batches < 1 or steps % n_batches:
        raise ValueError(f"steps {steps} not divisible into {n_batches} batches")
    return steps // n_batches


def table_policy_kernel(sim, pol, rng, steps, warmup, n_batches, start=None):
    """Closed loop under a per-state randomized decision table."""
    cdef long long batch_len = _check_batches(steps, n_batches)
    cdef long long[:, ::1] row_of = sim.row_of
    cdef long long[::1] row_ptr = sim.row_ptr
    cdef long long[::1] cols = sim.cols
    cdef double[::1] probs = sim.probs
    cdef int[::1] count = sim.count
    cdef int[::1] popk = sim.popk
    cdef double[:, ::1] table = np.array(pol, dtype=np.float64, order="C", copy=True)
    cdef int K = sim.K
    cdef long long i = sim.start if start is None else start
    bt_arr = np.zeros(n_batches)
    bc_arr = np.zeros(n_batches)
    cdef double[::1] bt = bt_arr
    cdef double[::1] bc = bc_arr
    cdef bitgen_t *bg = _bg(rng)
    cdef long long total = warmup + steps, wu = warmup
    cdef long long t, r, j, e, lo, hi, b
    cdef int k, kk, rb
    cdef double u, acc, p, x
    cdef double sq = 0.0
    rel_arr = np.zeros(sim.n_ramps)
    cdef double[::1] rel = rel_arr
    for t in range(total):
        u = bg.next_double(bg.state)
        acc = 0.0
        k = 0
        for kk in range(K):
            p = table[i, kk]
            if p > 0.0:
                k = kk
                acc += p
                if u < acc:
                    break
        r = row_of[i, k]
        if r < 0:
            k = 0
            r = row_of[i, 0]
        u = bg.next_double(bg.state)
        acc = 0.0
        lo = row_ptr[r]
        hi = row_ptr[r + 1]
        j = cols[hi - 1]
        for e in range(lo, hi):
            acc += probs[e]
            if u < acc:
                j = cols[e]
                break
        if t >= wu:
            b = (t - wu) // batch_len
            x = count[i] + popk[k] - count[j]
            bt[b] += x
            bc[b] += count[i]
            sq += x * x
            kk = k
            rb = 0
            while kk:
                if kk & 1:
                    rel[rb] += 1.0
                kk >>= 1
                rb += 1
        i = j
    return {
        "batch_takeoffs": bt_arr,
        "batch_count": bc_arr,
        "takeoff_sq": sq,
        "ramp_releases": rel_arr,
        "final_state": int(i),
    }


def threshold_kernel(sim, Th, rng, steps, warmup, n_batches, start=None, ctrl_turn=0):
    """Closed loop under the count-threshold rule (deterministic controller)."""
    cdef long long batch_len = _check_batches(steps, n_batches)
    cdef long long[:, ::1] row_of = sim.row_of
    cdef long long[::1] row_ptr = sim.row_ptr
    cdef long long[::1] cols = sim.cols
    cdef double[::1] probs = sim.probs
    cdef int[::1] count = sim.count
    cdef int[::1] cp = sim.cp
    cdef int[::1] turn = sim.turn
    cdef int[::1] popk = sim.popk
    cdef bint in_state = sim.alternation
    cdef int R = sim.n_ramps
    cdef int ctrl = ctrl_turn
    cdef int th = Th
    cdef long long i = sim.start if start is None else start
    bt_arr = np.zeros(n_batches)
    bc_arr = np.zeros(n_batches)
    cdef double[::1] bt = bt_arr
    cdef double[::1] bc = bc_arr
    cdef bitgen_t *bg = _bg(rng)
    cdef long long total = warmup + steps, wu = warmup
    cdef long long t, r, j, e, lo, hi, b
    cdef int k, tr, km, rb
    cdef double u, acc, x
    cdef double sq = 0.0
    rel_arr = np.zeros(sim.n_ramps)
    cdef double[::1] rel = rel_arr
    for t in range(total):
        tr = turn[i] if in_state else ctrl
        if count[i] > th or (cp[i] >> tr) & 1:
            k = 0
        else:
            k = 1 << tr
            if not in_state:
                ctrl = (tr + 1) % R
        r = row_of[i, k]
        u = bg.next_double(bg.state)
        acc = 0.0
        lo = row_ptr[r]
        hi = row_ptr[r + 1]
        j = cols[hi - 1]
        for e in range(lo, hi):
            acc += probs[e]
            if u < acc:
                j = cols[e]
                break
        if t >= wu:
            b = (t - wu) // batch_len
            x = count[i] + popk[k] - count[j]
            bt[b] += x
            bc[b] += count[i]
            sq += x * x
            km = k
            rb = 0
            while km:
                if km & 1:
                    rel[rb] += 1.0
                km >>= 1
                rb += 1
        i = j
    return {
        "batch_takeoffs": bt_arr,
        "batch_count": bc_arr,
        "takeoff_sq": sq,
        "ramp_releases": rel_arr,
        "final_state": int(i),
        "final_turn": int(ctrl),
    }


def mls_kernel(sim, pol, obs, rng, steps, warmup, n_batches, start=None):
    """Closed loop of the most-likely-state agent with its Bayes filter."""
    cdef long long batch_len = _check_batches(steps, n_batches)
    cdef long long[:, ::1] row_of = sim.row_of
    cdef long long[::1] row_ptr = sim.row_ptr
    cdef long long[::1] cols = sim.cols
    cdef double[::1] probs = sim.probs
    cdef int[::1] count = sim.count
    cdef int[::1] popk = sim.popk
    cdef double[:, ::1] table = np.array(pol, dtype=np.float64, order="C", copy=True)
    cdef long long[::1] obs_id = obs.obs_id
    cdef long long[::1] bucket_ptr = obs.bucket_ptr
    cdef long long[::1] bucket_states = obs.bucket_states
    cdef int K = sim.K
    cdef long long n = sim.n_states
    cdef long long i = sim.start if start is None else start

    pred_arr = np.zeros(n)
    cdef double[::1] pred = pred_arr
    cdef long long[::1] touched = np.empty(n, dtype=np.int64)
    cdef long long n_touched = 0
    cdef long long[::1] sup = np.empty(n, dtype=np.int64)
    cdef double[::1] bp = np.empty(n)
    cdef long long[::1] nsup = np.empty(n, dtype=np.int64)
    cdef double[::1] nbp = np.empty(n)
    cdef long long n_sup = 1, n_new
    sup[0] = i
    bp[0] = 1.0

    bt_arr = np.zeros(n_batches)
    bc_arr = np.zeros(n_batches)
    cdef double[::1] bt = bt_arr
    cdef double[::1] bc = bc_arr
    cdef bitgen_t *bg = _bg(rng)
    cdef long long total = warmup + steps, wu = warmup
    cdef double max_norm_err = 0.0, min_truth = 1.0
    cdef long long mismatches = 0, resets = 0
    cdef long long t, r, rr, j, e, lo, hi, b, s, c, best, o, idx
    cdef int km, rb
    cdef double x
    cdef double sq = 0.0
    rel_arr = np.zeros(sim.n_ramps)
    cdef double[::1] rel = rel_arr
    cdef int k, kk, k_exec
    cdef double u, acc, p, bv, w, denom, v, pv, q, ssum, err, tm
    for t in range(total):
        best = sup[0]
        bv = bp[0]
        for idx in range(1, n_sup):
            if bp[idx] > bv:
                bv = bp[idx]
                best = sup[idx]
        u = bg.next_double(bg.state)
        acc = 0.0
        k = 0
        for kk in range(K):
            p = table[best, kk]
            if p > 0.0:
                k = kk
                acc += p
                if u < acc:
                    break
        k_exec = k
        if row_of[i, k] < 0:
            k_exec = 0
            mismatches += 1
        r = row_of[i, k_exec]
        u = bg.next_double(bg.state)
        acc = 0.0
        lo = row_ptr[r]
        hi = row_ptr[r + 1]
        j = cols[hi - 1]
        for e in range(lo, hi):
            acc += probs[e]
            if u < acc:
                j = cols[e]
                break
        # predict: belief through the executed decision
        for idx in range(n_sup):
            s = sup[idx]
            rr = row_of[s, k_exec]
            if rr < 0:
                rr = row_of[s, 0]
            w = bp[idx]
            for e in range(row_ptr[rr], row_ptr[rr + 1]):
                c = cols[e]
                if pred[c] == 0.0:
                    touched[n_touched] = c
                    n_touched += 1
                pred[c] += w * probs[e]
        # condition on the observation of the new true state
        o = obs_id[j]
        lo = bucket_ptr[o]
        hi = bucket_ptr[o + 1]
        denom = 0.0
        for e in range(lo, hi):
            denom += pred[bucket_states[e]]
        n_new = 0
        ssum = 0.0
        if denom <= 0.0:
            resets += 1
            v = 1.0 / <double> (hi - lo)
            for e in range(lo, hi):
                nsup[n_new] = bucket_states[e]
                nbp[n_new] = v
                n_new += 1
                ssum += v
        else:
            for e in range(lo, hi):
                s = bucket_states[e]
                pv = pred[s]
                if pv > 0.0:
                    q = pv / denom
                    nsup[n_new] = s
                    nbp[n_new] = q
                    n_new += 1
                    ssum += q
        err = ssum - 1.0
        if err < 0.0:
            err = -err
        if err > max_norm_err:
            max_norm_err = err
        tm = 0.0
        for idx in range(n_new):
            if nsup[idx] == j:
                tm = nbp[idx]
                break
        if tm < min_truth:
            min_truth = tm
        for idx in range(n_touched):
            pred[touched[idx]] = 0.0
        n_touched = 0
        if t >= wu:
            b = (t - wu) // batch_len
            x = count[i] + popk[k_exec] - count[j]
            bt[b] += x
            bc[b] += count[i]
            sq += x * x
            km = k_exec
            rb = 0
            while km:
                if km & 1:
                    rel[rb] += 1.0
                km >>= 1
                rb += 1
        i = j
        for idx in range(n_new):
            sup[idx] = nsup[idx]
            bp[idx] = nbp[idx]
        n_sup = n_new
    return {
        "batch_takeoffs": bt_arr,
        "batch_count": bc_arr,
        "takeoff_sq": sq,
        "ramp_releases": rel_arr,
        "final_state": int(i),
        "max_norm_err": max_norm_err,
        "min_truth_mass": min_truth,
        "mismatches": int(mismatches),
        "resets": int(resets),
    }
