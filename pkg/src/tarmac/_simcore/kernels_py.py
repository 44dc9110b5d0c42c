"""Pure-Python closed-loop kernels.

Reference implementations of the three hot loops, written so every draw
and every floating-point accumulation happens in the same order as in the
compiled twins: one uniform for the decision (where the controller is
randomized), one uniform for the transition, scalar cumulative walks, and
sequential sums.  A run under either backend with the same Generator
state produces the same trajectory bit for bit.

Take-off counting uses conservation: takeoffs = N(i) + |k| - N(i').
Averages accumulate post-warmup into equal batches for batch-means
standard errors.
"""

from __future__ import annotations

import numpy as np


def _batches(steps, n_batches):
    if n_batches < 1 or steps % n_batches:
        raise ValueError(f"steps {steps} not divisible into {n_batches} batches")
    return steps // n_batches


def table_policy_kernel(sim, pol, rng, steps, warmup, n_batches, start=None):
    """Closed loop under a per-state randomized decision table."""
    batch_len = _batches(steps, n_batches)
    row_of = sim.row_of.tolist()
    row_ptr = sim.row_ptr.tolist()
    cols = sim.cols.tolist()
    probs = sim.probs.tolist()
    count = sim.count.tolist()
    popk = sim.popk.tolist()
    table = np.asarray(pol, dtype=np.float64).tolist()
    K = sim.K
    i = sim.start if start is None else int(start)
    bt = np.zeros(n_batches)
    bc = np.zeros(n_batches)
    sq = 0.0
    rel = [0.0] * sim.n_ramps
    for t in range(warmup + steps):
        u = rng.random()
        acc = 0.0
        k = 0
        row = table[i]
        for kk in range(K):
            p = row[kk]
            if p > 0.0:
                k = kk
                acc += p
                if u < acc:
                    break
        r = row_of[i][k]
        if r < 0:
            k = 0
            r = row_of[i][0]
        u = rng.random()
        acc = 0.0
        lo, hi = row_ptr[r], row_ptr[r + 1]
        j = cols[hi - 1]
        for e in range(lo, hi):
            acc += probs[e]
            if u < acc:
                j = cols[e]
                break
        if t >= warmup:
            b = (t - warmup) // batch_len
            x = count[i] + popk[k] - count[j]
            bt[b] += x
            bc[b] += count[i]
            sq += x * x
            kk = k
            rr = 0
            while kk:
                if kk & 1:
                    rel[rr] += 1.0
                kk >>= 1
                rr += 1
        i = j
    return {
        "batch_takeoffs": bt,
        "batch_count": bc,
        "takeoff_sq": sq,
        "ramp_releases": np.asarray(rel),
        "final_state": i,
    }


def threshold_kernel(sim, Th, rng, steps, warmup, n_batches, start=None, ctrl_turn=0):
    """Closed loop under the count-threshold rule.

    Deterministic controller: only the transition uniform is drawn.  Under
    alternation fairness the turn lives in the state; otherwise a
    controller-side turn rotates to the next ramp after each release.
    """
    batch_len = _batches(steps, n_batches)
    row_of = sim.row_of.tolist()
    row_ptr = sim.row_ptr.tolist()
    cols = sim.cols.tolist()
    probs = sim.probs.tolist()
    count = sim.count.tolist()
    cp = sim.cp.tolist()
    turn = sim.turn.tolist()
    popk = sim.popk.tolist()
    in_state = sim.alternation
    R = sim.n_ramps
    ctrl = int(ctrl_turn)
    i = sim.start if start is None else int(start)
    bt = np.zeros(n_batches)
    bc = np.zeros(n_batches)
    sq = 0.0
    rel = [0.0] * sim.n_ramps
    for t in range(warmup + steps):
        tr = turn[i] if in_state else ctrl
        if count[i] > Th or (cp[i] >> tr) & 1:
            k = 0
        else:
            k = 1 << tr
            if not in_state:
                ctrl = (tr + 1) % R
        r = row_of[i][k]
        u = rng.random()
        acc = 0.0
        lo, hi = row_ptr[r], row_ptr[r + 1]
        j = cols[hi - 1]
        for e in range(lo, hi):
            acc += probs[e]
            if u < acc:
                j = cols[e]
                break
        if t >= warmup:
            b = (t - warmup) // batch_len
            x = count[i] + popk[k] - count[j]
            bt[b] += x
            bc[b] += count[i]
            sq += x * x
            kk = k
            rr = 0
            while kk:
                if kk & 1:
                    rel[rr] += 1.0
                kk >>= 1
                rr += 1
        i = j
    return {
        "batch_takeoffs": bt,
        "batch_count": bc,
        "takeoff_sq": sq,
        "ramp_releases": np.asarray(rel),
        "final_state": i,
        "final_turn": ctrl,
    }


def mls_kernel(sim, pol, obs, rng, steps, warmup, n_batches, start=None):
    """Closed loop of the most-likely-state agent with its Bayes filter.

    The belief lives on a sparse support (states ascending).  Per step:
    act from the policy at the belief argmax (ties to the lowest state),
    execute no-release on a true-state infeasibility (counted as a
    mismatch), advance the truth, then push the belief through the
    executed decision and condition on the new observation.  A zero
    normalizer resets the belief to uniform over the observation's states.
    """
    batch_len = _batches(steps, n_batches)
    row_of = sim.row_of.tolist()
    row_ptr = sim.row_ptr.tolist()
    cols = sim.cols.tolist()
    probs = sim.probs.tolist()
    count = sim.count.tolist()
    popk = sim.popk.tolist()
    table = np.asarray(pol, dtype=np.float64).tolist()
    obs_id = obs.obs_id.tolist()
    bucket_ptr = obs.bucket_ptr.tolist()
    bucket_states = obs.bucket_states.tolist()
    K = sim.K
    i = sim.start if start is None else int(start)
    sup = [i]
    bp = [1.0]
    pred = [0.0] * sim.n_states
    touched = []
    max_norm_err = 0.0
    min_truth = 1.0
    mismatches = 0
    resets = 0
    bt = np.zeros(n_batches)
    bc = np.zeros(n_batches)
    sq = 0.0
    rel = [0.0] * sim.n_ramps
    for t in range(warmup + steps):
        best = sup[0]
        bv = bp[0]
        for idx in range(1, len(sup)):
            if bp[idx] > bv:
                bv = bp[idx]
                best = sup[idx]
        u = rng.random()
        acc = 0.0
        k = 0
        row = table[best]
        for kk in range(K):
            p = row[kk]
            if p > 0.0:
                k = kk
                acc += p
                if u < acc:
                    break
        k_exec = k
        if row_of[i][k] < 0:
            k_exec = 0
            mismatches += 1
        r = row_of[i][k_exec]
        u = rng.random()
        acc = 0.0
        lo, hi = row_ptr[r], row_ptr[r + 1]
        j = cols[hi - 1]
        for e in range(lo, hi):
            acc += probs[e]
            if u < acc:
                j = cols[e]
                break
        # predict: belief through the executed decision
        for idx in range(len(sup)):
            s = sup[idx]
            rr = row_of[s][k_exec]
            if rr < 0:
                rr = row_of[s][0]
            w = bp[idx]
            for e in range(row_ptr[rr], row_ptr[rr + 1]):
                c = cols[e]
                if pred[c] == 0.0:
                    touched.append(c)
                pred[c] += w * probs[e]
        # condition on the observation of the new true state
        o = obs_id[j]
        lo, hi = bucket_ptr[o], bucket_ptr[o + 1]
        denom = 0.0
        for e in range(lo, hi):
            denom += pred[bucket_states[e]]
        nsup = []
        nbp = []
        ssum = 0.0
        if denom <= 0.0:
            resets += 1
            v = 1.0 / (hi - lo)
            for e in range(lo, hi):
                nsup.append(bucket_states[e])
                nbp.append(v)
                ssum += v
        else:
            for e in range(lo, hi):
                s = bucket_states[e]
                pv = pred[s]
                if pv > 0.0:
                    q = pv / denom
                    nsup.append(s)
                    nbp.append(q)
                    ssum += q
        err = abs(ssum - 1.0)
        if err > max_norm_err:
            max_norm_err = err
        tm = 0.0
        for idx in range(len(nsup)):
            if nsup[idx] == j:
                tm = nbp[idx]
                break
        if tm < min_truth:
            min_truth = tm
        for c in touched:
            pred[c] = 0.0
        touched.clear()
        if t >= warmup:
            b = (t - warmup) // batch_len
            x = count[i] + popk[k_exec] - count[j]
            bt[b] += x
            bc[b] += count[i]
            sq += x * x
            kk = k_exec
            rr = 0
            while kk:
                if kk & 1:
                    rel[rr] += 1.0
                kk >>= 1
                rr += 1
        i = j
        sup = nsup
        bp = nbp
    return {
        "batch_takeoffs": bt,
        "batch_count": bc,
        "takeoff_sq": sq,
        "ramp_releases": np.asarray(rel),
        "final_state": i,
        "max_norm_err": max_norm_err,
        "min_truth_mass": min_truth,
        "mismatches": mismatches,
        "resets": resets,
    }
