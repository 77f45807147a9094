"""Pseudo-3D FPN lesion detection toolkit: autograd engine, MP3D/MR3D
backbones, anchor-based detector, CT-style synthetic data pipeline,
FROC/AP evaluation, and a closed-form cost profiler."""

import os as _os

# Thread-count pinning must land before numpy initializes its BLAS pools.
_threads = _os.environ.get("MP3D_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
