import os

# Pin BLAS pools to one thread before numpy loads so every run of the
# suite produces identical floating-point results.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest


@pytest.fixture
def rng_matrix():
    """Deterministic random matrices with entries in [-1, 1]."""

    def make(rows, cols, seed=0):
        gen = np.random.default_rng(seed)
        return gen.uniform(-1.0, 1.0, size=(rows, cols))

    return make
