"""Shared helpers for the test suite."""

import numpy as np


def rel_err(got: np.ndarray, want: np.ndarray, floor: float = 1e-8) -> float:
    """Max absolute deviation normalized by the largest reference magnitude.

    A tensor-level relative error: robust to individual near-zero
    coordinates while still catching any coordinate that is off at the
    scale of the gradient itself.
    """
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(float(np.max(np.abs(want))) if want.size else 0.0, floor)
    return float(np.max(np.abs(got - want))) / denom if got.size else 0.0
