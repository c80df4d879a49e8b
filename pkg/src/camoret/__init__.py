"""Camouflage-aware image-text retrieval with confidence-conditioned graph attention."""

import os as _os

# BLAS thread pools are sized when numpy loads; one thread keeps reductions deterministic.
_threads = _os.environ.get("CAMORET_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
