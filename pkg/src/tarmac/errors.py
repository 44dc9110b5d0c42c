"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Airport config file is malformed or inconsistent."""


class EncodingError(ValueError):
    """State fields do not fit the topology's bit layout."""


class StateRangeError(IndexError):
    """State index outside the topology's index space."""


class InfeasibleStatisticsError(ValueError):
    """Operational statistics admit no valid parameter solution."""


class StateSpaceCapError(RuntimeError):
    """Reachable state space exceeded the configured cap."""


class InfeasibleDecisionError(ValueError):
    """Decision mask not feasible in the given state."""


class SolverError(RuntimeError):
    """The stationary-probability program failed or is infeasible."""


class MultichainError(RuntimeError):
    """Closed-loop chain has more than one recurrent class."""


class EmptyOverlapError(ValueError):
    """Frontiers share no common take-off-rate range."""


class CurveAlignmentError(ValueError):
    """No saturation plateau found while aligning throughput curves."""


class BeliefResetError(RuntimeError):
    """Belief update hit a zero normalizer for the observed signal."""
