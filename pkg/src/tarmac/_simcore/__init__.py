"""Simulation core: compiled kernels when available, pure Python otherwise.

The backend is picked once at import.  TARMAC_FORCE_PY=1 forces the
pure-Python kernels (used by the parity tests and the benchmark); both
backends consume the caller's numpy Generator identically, so results for
one seed do not depend on the choice.
"""

import os

from .arrays import ObsArrays, SimArrays, obs_arrays, policy_arrays, sim_arrays

if os.environ.get("TARMAC_FORCE_PY") == "1":
    from . import kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:
        from . import kernels_py as _impl

        BACKEND = "python"

table_policy_kernel = _impl.table_policy_kernel
threshold_kernel = _impl.threshold_kernel
mls_kernel = _impl.mls_kernel

__all__ = [
    "BACKEND",
    "ObsArrays",
    "SimArrays",
    "mls_kernel",
    "obs_arrays",
    "policy_arrays",
    "sim_arrays",
    "table_policy_kernel",
    "threshold_kernel",
]
