"""Grid detector with a training-only excitation layer, built on a small numpy autodiff core."""

import os

# BLAS threading changes float summation order; one thread keeps runs bit-reproducible.
_threads = os.environ.setdefault("AE_DET_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
