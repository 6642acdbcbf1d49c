"""Cluster dynamics and structural-change analytics for spike-protein variants."""

import os as _os

# The TBB layer found on many systems is too old for numba and only warns;
# prefer the OpenMP or built-in work-queue layers unless the user chose.
if "NUMBA_THREADING_LAYER_PRIORITY" not in _os.environ and "NUMBA_THREADING_LAYER" not in _os.environ:
    import numba as _numba

    _numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
