"""Canonical toy airports used by the optimality tests.

Kept in one place so the unit tests, the acceptance tests, and the
offline enumeration script all evaluate the same instances.
"""


def _chain_toy(name, n_cells, B):
    cells = [
        {"id": f"c{i}", "successor": f"c{i + 1}" if i + 1 < n_cells else "buffer"}
        for i in range(n_cells)
    ]
    return {
        "name": name,
        "params": {"L_s": 200.0, "T_s": 60.0, "m": 0.7, "c1": 0.5, "c2": 0.2},
        "buffer_capacity": B,
        "cells": cells,
        "ramps": [{"name": "P", "entry_cell": "c0"}],
        "fairness_mode": "none",
    }


def toy1_config():
    """1 ramp, 1 cell, queue capacity 1: 8 states, 16 deterministic policies."""
    return _chain_toy("toy1", 1, 1)


def toy2_config():
    """1 ramp, 3 cells, queue capacity 2: 48 states, 2^24 deterministic
    policies."""
    return _chain_toy("toy2", 3, 2)


def two_ramp_shared_toy_config():
    """2 ramps feeding the same single cell, queue capacity 1: 16 states
    and 65536 deterministic policies, live-enumerable, exercises 4-way
    decision masks (the first-declared ramp wins a both-release tie)."""
    return {
        "name": "toy2s",
        "params": {"L_s": 200.0, "T_s": 60.0, "m": 0.7, "c1": 0.5, "c2": 0.2},
        "buffer_capacity": 1,
        "cells": [{"id": "a", "successor": "buffer"}],
        "ramps": [
            {"name": "P", "entry_cell": "a"},
            {"name": "Q", "entry_cell": "a"},
        ],
        "fairness_mode": "none",
    }


def two_ramp_toy_config(fairness="none"):
    """2 ramps on 2 cells, queue capacity 1: 32 states but 4^8 * 2^16
    deterministic policies, far too many to enumerate, so optimality is
    checked one-sidedly against sampled policies.  Exercises fairness."""
    return {
        "name": "toy2r",
        "params": {"L_s": 200.0, "T_s": 60.0, "m": 0.7, "c1": 0.5, "c2": 0.2},
        "buffer_capacity": 1,
        "cells": [
            {"id": "a", "successor": "b"},
            {"id": "b", "successor": "buffer"},
        ],
        "ramps": [
            {"name": "P", "entry_cell": "a"},
            {"name": "Q", "entry_cell": "b"},
        ],
        "fairness_mode": fairness,
    }


def three_ramp_toy_config(fairness="statistical"):
    """3 ramps on 3 cells, queue capacity 1: exercises fairness rows for
    more than two ramps (ramp 0 paired against each of the others)."""
    return {
        "name": "toy3r",
        "params": {"L_s": 200.0, "T_s": 60.0, "m": 0.7, "c1": 0.5, "c2": 0.2},
        "buffer_capacity": 1,
        "cells": [
            {"id": "a", "successor": "b"},
            {"id": "b", "successor": "c"},
            {"id": "c", "successor": "buffer"},
        ],
        "ramps": [
            {"name": "P", "entry_cell": "a"},
            {"name": "Q", "entry_cell": "b"},
            {"name": "R", "entry_cell": "c"},
        ],
        "fairness_mode": fairness,
    }


BETAS = (0.5, 5.0, 50.0)
