"""Question-conditioned graph learning and spatial graph convolutions for VQA.

Everything is plain numpy with hand-written backward passes. Seeded runs are
meant to be byte-reproducible, so BLAS is pinned to one thread unless the
caller has already chosen otherwise.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
