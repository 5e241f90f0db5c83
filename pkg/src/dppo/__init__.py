"""Teacher/student biped locomotion training with a combined distillation and PPO objective."""

import os as _os

# DPPO_THREADS caps BLAS/OpenMP pools; it has to be applied before numpy loads.
_threads = _os.environ.get("DPPO_THREADS", "")
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ[_var] = _threads

__version__ = "0.1.0"
