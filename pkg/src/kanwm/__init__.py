"""World-model agent with swappable MLP, KAN and FastKAN backbones."""

import os

# Single-threaded BLAS keeps reductions in a fixed order, so reruns are bitwise identical.
# Only effective when kanwm is imported before numpy; export the variables yourself otherwise.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del _var

__version__ = "0.1.0"
