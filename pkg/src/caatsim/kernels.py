"""Dense float64 kernels and their exact backward rules.

Everything else in the package (collectives, sharded layers, the
training loop) is built from the handful of operations defined here.
All simulation arithmetic is 64-bit; the only rounding facility is the
explicit 16-bit emulation used by the collectives' accumulation path.
"""

from __future__ import annotations

import enum
import math

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeMismatchError",
    "PrecisionMode",
    "matmul",
    "activation",
    "activation_backward",
    "rmsnorm",
    "rmsnorm_backward",
    "softmax_ce_loss",
    "finite_difference_grad",
    "round_emulated16",
    "RMSNORM_EPS",
]

RMSNORM_EPS = 1e-6

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class PrecisionMode(enum.Enum):
    """Accumulation mode for simulated collectives.

    FULL64 performs no rounding. EMULATED16 rounds every accumulation
    step to the nearest value representable with 1 sign, 8 exponent and
    7 mantissa bits (round-to-nearest-even).
    """

    FULL64 = "full64"
    EMULATED16 = "emulated16"

    @property
    def wire_bits(self) -> int:
        """Bit width a real transport would use for this mode."""
        return 32 if self is PrecisionMode.FULL64 else 16


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of a (m, k) and a (k, n) matrix, accumulated in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(
            f"matmul expects 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"inner extents differ: {a.shape} x {b.shape}"
        )
    return a @ b


def activation(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GeLU, applied elementwise."""
    return activation_with_cdf(x)[0]


def activation_with_cdf(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GeLU plus the underlying normal CDF, so a caller keeping the
    forward cache can avoid recomputing erf in the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    return x * cdf, cdf


def activation_backward(
    x: np.ndarray, upstream: np.ndarray, cdf: np.ndarray | None = None
) -> np.ndarray:
    """Derivative of the exact GeLU at ``x`` times ``upstream``.

    ``cdf`` is the optional cached normal CDF from activation_with_cdf.
    """
    x = np.asarray(x, dtype=np.float64)
    if cdf is None:
        cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (cdf + x * pdf) * upstream


def rmsnorm(x: np.ndarray, gamma: np.ndarray, eps: float = RMSNORM_EPS) -> np.ndarray:
    """Per-row RMS normalization over the last axis, scaled by ``gamma``."""
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if x.shape[-1] != gamma.shape[-1] or gamma.ndim != 1:
        raise ShapeMismatchError(
            f"gamma {gamma.shape} does not match last extent of x {x.shape}"
        )
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv_rms * gamma


def rmsnorm_backward(
    x: np.ndarray,
    gamma: np.ndarray,
    upstream: np.ndarray,
    eps: float = RMSNORM_EPS,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of rmsnorm w.r.t. ``x`` and ``gamma``.

    Returns (dx, dgamma); dgamma is summed over all leading axes.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    h = x.shape[-1]
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * inv_rms
    ug = upstream * gamma
    # d(inv_rms)/dx_j = -inv_rms^3 * x_j / h, contracted against sum(ug * x)
    dx = inv_rms * (ug - xhat * np.mean(ug * xhat, axis=-1, keepdims=True))
    dgamma = np.sum(
        (upstream * xhat).reshape(-1, h), axis=0
    )
    return dx, dgamma


def softmax_ce_loss(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of row-wise softmax against integer targets.

    ``logits`` is (n, vocab); ``targets`` holds n class indices. Returns
    the scalar loss and the exact gradient w.r.t. the logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).ravel()
    if logits.ndim != 2 or targets.shape[0] != logits.shape[0]:
        raise ShapeMismatchError(
            f"logits {logits.shape} vs {targets.shape[0]} targets"
        )
    n, vocab = logits.shape
    if n == 0:
        raise ValueError("softmax_ce_loss needs at least one row")
    if targets.min() < 0 or targets.max() >= vocab:
        raise ValueError(f"target out of range [0, {vocab})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = float(-log_probs[rows, targets].mean())
    dlogits = probs
    dlogits[rows, targets] -= 1.0
    dlogits /= n
    return loss, dlogits


def finite_difference_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, per coordinate.

    The reference oracle for every hand-written backward in this
    package. ``f`` must be deterministic.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def round_emulated16(x: np.ndarray) -> np.ndarray:
    """Round to the nearest 16-bit value (1 sign, 8 exponent, 7 mantissa).

    Emulated as float64 -> float32 -> drop 16 mantissa bits with
    round-to-nearest-even. Deterministic and idempotent; non-finite
    values pass through unchanged.
    """
    arr = np.asarray(x, dtype=np.float64)
    f32 = arr.astype(np.float32)
    bits = f32.view(np.uint32)
    rounded = (bits + np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))) & np.uint32(
        0xFFFF0000
    )
    out = np.where(np.isfinite(f32), rounded, bits).view(np.float32)
    return out.astype(np.float64)
