"""dws: action-conditioned video world models on toy pixel environments."""

import os

__version__ = "0.1.0"

# On small CPU counts, OpenBLAS worker threads and numba's OMP pool fight
# over cores (spin-waiting between kernels costs ~3x end to end). Pin BLAS
# to one thread and make the OMP pool yield when idle; numba parallel
# kernels still use every core. Env vars cover fresh interpreters,
# threadpoolctl covers processes that imported numpy first.
os.environ.setdefault("OMP_WAIT_POLICY", "PASSIVE")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy  # noqa: E402  (loads the BLAS before we clamp it)

try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _blas_limiter = _threadpool_limits(limits=1, user_api="blas")
except ImportError:  # pragma: no cover - threadpoolctl ships with sklearn here
    _blas_limiter = None
