"""Closed-form per-layer compute/communication cost model.

Unit convention: the capacity ratio ``c`` is expressed as FLOPs per
communicated element, so total time ``gemm_ops(...) / c + payload(...)``
is measured in element-times and is dimensionally consistent without
byte-width bookkeeping. Reports that want bytes can multiply payloads
by the wire width (2 bytes at 16-bit).

All quantities are per device for one transformer layer's forward pass
at batch size 1: a layer synchronizes twice (attention and MLP) and
each synchronization moves ``s * h * p`` elements, hence the payload
``2 * s * h * p``.
"""

from __future__ import annotations

__all__ = [
    "gemm_ops",
    "gemm_ops_breakdown",
    "payload",
    "total_time",
    "speedup",
    "optimal_p",
    "mask_comm_reduction",
    "sweep_csv",
]


def gemm_ops(h: float, s: float, r: float) -> float:
    """Per-device GEMM work of one layer: (24 s h^2 + 4 s^2 h) / r."""
    _check_positive(h=h, s=s, r=r)
    return (24.0 * s * h * h + 4.0 * s * s * h) / r


def gemm_ops_breakdown(h: float, s: float, r: float) -> dict[str, float]:
    """Component view of gemm_ops: the MLP pair and the attention chain."""
    _check_positive(h=h, s=s, r=r)
    return {
        "mlp": 16.0 * s * h * h / r,
        "attn_qkv_proj": 6.0 * s * h * h / r,
        "attn_scores": 4.0 * s * s * h / r,
        "attn_out_proj": 2.0 * s * h * h / r,
    }


def payload(h: float, s: float, p: float) -> float:
    """Per-device communication payload of one layer: 2 s h p elements."""
    _check_positive(h=h, s=s)
    _check_fraction(p)
    return 2.0 * s * h * p


def total_time(h: float, s: float, r: float, c: float, p: float) -> float:
    """Compute plus communication in element-times: G/c + P(p)."""
    _check_positive(c=c)
    return gemm_ops(h, s, r) / c + payload(h, s, p)


def speedup(h: float, s: float, r: float, c: float, p: float) -> float:
    """Fractional time saved versus full synchronization:
    (T(1) - T(p)) / T(1) = (1 - p) / (1 + (12h + 2s) / (c r))."""
    _check_positive(h=h, s=s, r=r, c=c)
    _check_fraction(p)
    return (1.0 - p) / (1.0 + (12.0 * h + 2.0 * s) / (c * r))


def optimal_p(h: float, s: float, r: float, c: float) -> float:
    """Largest p at which communication still hides behind compute:
    min((12h + 2s) / (c r), 1)."""
    _check_positive(h=h, s=s, r=r, c=c)
    return min((12.0 * h + 2.0 * s) / (c * r), 1.0)


def mask_comm_reduction(p: float) -> tuple[float, float]:
    """Total tensor-parallel communication reduction at keep fraction p.

    Partial channel-reduce compresses both directions of both passes:
    reduction 1 - p. A forward-only mask compresses only the forward
    reduce-scatter, one quarter of the traffic: reduction (1 - p) / 4.
    """
    _check_fraction(p)
    return (1.0 - p), (1.0 - p) / 4.0


def sweep_csv(h: float, s: float, r: float, c: float, points: int = 21) -> str:
    """CSV sweep over p with columns p,G,P,T,speedup and a p* summary row."""
    lines = ["p,G,P,T,speedup"]
    g = gemm_ops(h, s, r)
    for i in range(points):
        p = i / (points - 1)
        lines.append(
            f"{p!r},{g!r},{payload(h, s, p)!r},"
            f"{total_time(h, s, r, c, p)!r},{speedup(h, s, r, c, p)!r}"
        )
    lines.append(f"# p_star={optimal_p(h, s, r, c)!r}")
    return "\n".join(lines) + "\n"


def _check_positive(**values: float) -> None:
    for name, value in values.items():
        if value <= 0:
            raise ValueError(f"{name} must be positive, got {value}")


def _check_fraction(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
