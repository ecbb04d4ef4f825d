"""flowforge: normalizing flows built from analytic scalar bijections.

Subpackages:
    kernels     stable numerics, Cardano solver, small 2D DFT, seeded PRNG
    autodiff    tape-based reverse-mode AD over numpy arrays
    bijections  the analytic scalar bijections and the affine baseline
    flows       composable flow layers and whole-flow density/sampling
    targets     benchmark distributions and the phi^4 Metropolis oracle
    training    losses, Adam, schedules, metrics, experiment presets
    cli         the `flowforge` command-line experiment runner
"""

__version__ = "0.1.0"

import os as _os

# The arrays in this package are small (batches of a few thousand doubles);
# multi-threaded BLAS spends more time synchronizing than computing on them,
# so pin the pools to one thread.
_os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
_os.environ.setdefault("OMP_NUM_THREADS", "1")
try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - best effort
    pass
