"""Airport departure flow as an average-cost decision process.

Calibrates a discrete surface model from operational statistics, solves
optimal spot-release policies through a stationary-probability program,
runs partial-information (most-likely-state) agents against threshold
benchmarks, and compares the resulting throughput frontiers.
"""

from .calibration import (
    OpsStatistics,
    ThroughputBin,
    align_saturation_shift,
    calibrate_model_params,
    derive_ama_taxi_stats,
    ingest_ops_records,
    size_runway_buffer,
    solve_bernoulli_pair,
    solve_taxiway_params,
    taxiway_real_solution,
)
from .dynamics import (
    TransitionModel,
    build_transition_model,
    cached_transition_model,
    sample_step,
    step_distribution,
)
from .topology import (
    AirportTopology,
    ModelParams,
    StateVector,
    config_hash,
    count_taxiing,
    decode_state,
    encode_state,
    feasible_decisions,
    load_topology,
    runway_idle_indicator,
)

__version__ = "0.1.0"
