"""Weakly-supervised emphysema subtype scoring on volumetric chest CT.

Set DRAM_THREADS=<n> before first import to cap BLAS worker threads;
DRAM_THREADS=1 is the single-threaded reference mode used for
reproducibility checks.
"""

import os

# Must run before numpy is first imported anywhere in the process.
_cap = os.environ.get("DRAM_THREADS")
if _cap:
    for _var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ[_var] = _cap

__version__ = "0.1.0"
