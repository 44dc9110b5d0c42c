"""Timing comparison of the compiled and pure-python simulation kernels.

Runs the three closed-loop kernels (full-state table, count threshold,
belief-filter MLS) on a shipped airport config under both backends and
prints steps/second plus the speedup.  The two backends consume the RNG
stream identically, so outputs are checked for exact equality as well.

Usage: python3 benchmarks/bench_kernels.py [--airport laguardia]
       [--steps 200000] [--seed 0]
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))

from tarmac._simcore import kernels_py
from tarmac._simcore.arrays import obs_arrays, policy_arrays, sim_arrays
from tarmac.dynamics import cached_transition_model
from tarmac.policies import ObservationCoder
from tarmac.topology import config_hash, load_topology

try:
    from tarmac._simcore import _kernels
except ImportError:
    _kernels = None


def release_all_policy(model):
    """One-hot policy releasing every spot allowed in each state."""
    probs = np.zeros((model.n_states, model.K))
    for i in range(model.n_states):
        ks = np.nonzero(model.row_of[i] >= 0)[0]
        probs[i, ks[-1]] = 1.0
    return probs


def bench(fn, args, steps, seed):
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    out = fn(*args, rng, steps, 1000, 10)
    dt = time.perf_counter() - t0
    return out, dt


def same(a, b):
    keys = sorted(set(a) & set(b))
    return all(np.array_equal(np.asarray(a[k]), np.asarray(b[k])) for k in keys)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--airport", default="laguardia")
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t = load_topology(args.airport)
    model = cached_transition_model(t, config_hash(args.airport))
    sim = sim_arrays(model)
    pol = policy_arrays(release_all_policy(model))
    runs = [
        ("table", "table_policy_kernel", (sim, pol)),
        ("threshold", "threshold_kernel", (sim, 6)),
    ]
    if t.observation_schemes:
        name = sorted(t.observation_schemes)[0]
        coder = ObservationCoder(t, t.observation_schemes[name])
        obs = obs_arrays(coder.table(model))
        runs.append((f"mls[{name}]", "mls_kernel", (sim, pol, obs)))

    print(f"{t.name}: {model.n_states} states, {args.steps} steps per run")
    print(f"{'kernel':<12} {'python':>12} {'compiled':>12} {'speedup':>8}  match")
    for label, fname, fargs in runs:
        out_py, dt_py = bench(getattr(kernels_py, fname), fargs, args.steps, args.seed)
        line = f"{label:<12} {args.steps / dt_py:>10.0f}/s"
        if _kernels is None:
            print(line + "   (compiled backend not built)")
            continue
        out_c, dt_c = bench(getattr(_kernels, fname), fargs, args.steps, args.seed)
        print(line + f" {args.steps / dt_c:>10.0f}/s {dt_py / dt_c:>7.1f}x"
              f"  {'yes' if same(out_py, out_c) else 'NO'}")


if __name__ == "__main__":
    main()
