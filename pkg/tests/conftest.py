import os

# Single-threaded BLAS keeps results reproducible across worker layouts and
# lets the sweep tests parallelize across processes instead. Must be set
# before numpy is first imported.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
