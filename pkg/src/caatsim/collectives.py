"""Simulated tensor-parallel collectives with exact communication accounting.

A RankSet carries the per-rank tensors that meet at a synchronization
point. Collectives return new RankSets and never mutate their inputs.
Every reduction runs in ascending rank order, so a single process can
replay any schedule bit-for-bit, and replacing a collective with local
summation (logical-device inference) is exactly the same arithmetic.

Communication is accounted in elements per rank under a flat payload
model: a full all-reduce of an n-element tensor costs 2n (n sent plus
n received), its reduce-scatter and all-gather halves cost n each, and
a partial channel-reduce costs 2 * tokens * shared_count. Passing
``ledger=None`` runs the same arithmetic communication-free (used for
logical-device inference and evaluation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from caatsim.kernels import PrecisionMode, ShapeMismatchError, round_emulated16

__all__ = [
    "RankSet",
    "PartialReduceSpec",
    "MaskSpec",
    "CommLedger",
    "all_reduce",
    "partial_channel_reduce",
    "partial_channel_reduce_vjp",
    "reduce_scatter",
    "all_gather",
    "apply_mask",
    "masked_all_reduce",
    "sync_param_grads",
    "FORWARD",
    "BACKWARD",
]

FORWARD = "forward"
BACKWARD = "backward"

_MASK_STREAM = 0x3A5C0DE


class RankSet:
    """Per-rank tensors at a synchronization point (identical shapes)."""

    __slots__ = ("tensors",)

    def __init__(self, tensors):
        tensors = [np.asarray(t, dtype=np.float64) for t in tensors]
        if not tensors:
            raise ValueError("RankSet needs at least one rank")
        shape = tensors[0].shape
        for t in tensors[1:]:
            if t.shape != shape:
                raise ShapeMismatchError(
                    f"per-rank shapes differ: {shape} vs {t.shape}"
                )
        self.tensors = tensors

    @property
    def m(self) -> int:
        return len(self.tensors)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensors[0].shape

    @property
    def h(self) -> int:
        return self.tensors[0].shape[-1]

    @property
    def tokens(self) -> int:
        """Number of h-sized rows per rank (all leading axes flattened)."""
        return self.tensors[0].size // self.h

    def __iter__(self):
        return iter(self.tensors)

    def __getitem__(self, rank: int) -> np.ndarray:
        return self.tensors[rank]


@dataclass(frozen=True)
class PartialReduceSpec:
    """Controls how much of the hidden dimension a collective synchronizes.

    The first floor(h * p) channels are shared (summed across ranks and
    replicated); the rest stay private to each rank. With
    ``scale_private`` the private channels are multiplied by sqrt(r) so
    all channels keep the same variance after the reduce.
    """

    p: float
    h: int
    scale_private: bool = False
    r: int = 1

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if self.h < 1:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")

    @property
    def shared_count(self) -> int:
        return math.floor(self.h * self.p)

    @property
    def private_scale(self) -> float:
        return math.sqrt(self.r) if self.scale_private else 1.0


@dataclass(frozen=True)
class MaskSpec:
    """Sparsification baseline: keep floor(h * p) entries per token.

    kind "topk" keeps the largest-magnitude entries (ties broken toward
    the lower channel index); kind "random" keeps a uniform subset drawn
    deterministically from (seed, step, rank).
    """

    kind: str
    p: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("topk", "random"):
            raise ValueError(f"mask kind must be topk or random, got {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")

    def keep_count(self, h: int) -> int:
        return math.floor(h * self.p)


@dataclass
class CommLedger:
    """Cumulative communicated elements per rank, by collective kind,
    pass and wire precision."""

    counts: dict = field(default_factory=dict)

    def record(self, kind: str, pass_: str, bits: int, elements: int) -> None:
        if elements < 0:
            raise ValueError("negative element count")
        key = (kind, pass_, bits)
        entry = self.counts.setdefault(key, [0, 0])
        entry[0] += int(elements)
        entry[1] += 1

    def elements(self, pass_: str | None = None, kind: str | None = None) -> int:
        total = 0
        for (k, p, _), (elems, _) in self.counts.items():
            if pass_ is not None and p != pass_:
                continue
            if kind is not None and k != kind:
                continue
            total += elems
        return total

    def calls(self, pass_: str | None = None, kind: str | None = None) -> int:
        total = 0
        for (k, p, _), (_, n) in self.counts.items():
            if pass_ is not None and p != pass_:
                continue
            if kind is not None and k != kind:
                continue
            total += n
        return total

    def rows(self) -> list[tuple[str, str, int, int, int]]:
        out = []
        for (kind, pass_, bits), (elems, n) in sorted(self.counts.items()):
            out.append((kind, pass_, bits, elems, n))
        return out

    def to_csv(self) -> str:
        lines = ["kind,pass,precision,elements_per_rank,calls"]
        for kind, pass_, bits, elems, n in self.rows():
            lines.append(f"{kind},{pass_},{bits},{elems},{n}")
        return "\n".join(lines) + "\n"


def _accumulate(tensors: list[np.ndarray], precision: PrecisionMode) -> np.ndarray:
    """Sum in ascending rank order, optionally rounding every step to
    the emulated 16-bit grid (operands are rounded on 'send' first)."""
    if precision is PrecisionMode.EMULATED16:
        acc = round_emulated16(tensors[0])
        for t in tensors[1:]:
            acc = round_emulated16(acc + round_emulated16(t))
        return acc
    acc = tensors[0].copy()
    for t in tensors[1:]:
        acc = acc + t
    return acc


def all_reduce(
    rs: RankSet,
    precision: PrecisionMode = PrecisionMode.FULL64,
    ledger: CommLedger | None = None,
    pass_: str = FORWARD,
    kind: str = "all_reduce",
) -> RankSet:
    """Every rank ends up with the elementwise sum across ranks."""
    if rs.m == 1:
        return RankSet([rs[0].copy()])
    total = _accumulate(rs.tensors, precision)
    if ledger is not None:
        ledger.record(kind, pass_, precision.wire_bits, 2 * total.size)
    return RankSet([total.copy() for _ in range(rs.m)])


def partial_channel_reduce(
    rs: RankSet,
    spec: PartialReduceSpec,
    precision: PrecisionMode = PrecisionMode.FULL64,
    ledger: CommLedger | None = None,
    pass_: str = FORWARD,
) -> RankSet:
    """Sum and replicate the first shared_count channels; keep the rest
    per-rank (scaled by sqrt(r) when spec.scale_private is set)."""
    if rs.h != spec.h:
        raise ShapeMismatchError(
            f"rank tensors have h={rs.h} but spec has h={spec.h}"
        )
    c = spec.shared_count
    scale = spec.private_scale
    if c > 0 and rs.m > 1:
        shared = _accumulate([t[..., :c] for t in rs.tensors], precision)
    else:
        shared = None
    out = []
    for t in rs.tensors:
        nt = t.copy()
        if shared is not None:
            nt[..., :c] = shared
        if scale != 1.0:
            nt[..., c:] *= scale
        out.append(nt)
    if ledger is not None and rs.m > 1:
        ledger.record("partial_reduce", pass_, precision.wire_bits, 2 * rs.tokens * c)
    return RankSet(out)


def partial_channel_reduce_vjp(
    upstream: RankSet,
    spec: PartialReduceSpec,
    precision: PrecisionMode = PrecisionMode.FULL64,
    ledger: CommLedger | None = None,
    pass_: str = BACKWARD,
) -> RankSet:
    """Vector-Jacobian product of the forward partial channel-reduce.

    Shared-channel gradients are all-reduced, private-channel gradients
    pass through per rank with the same sqrt(r) scaling: the operation
    is self-adjoint, i.e. structurally identical to the forward reduce.
    """
    return partial_channel_reduce(upstream, spec, precision, ledger, pass_)


def reduce_scatter(
    rs: RankSet,
    precision: PrecisionMode = PrecisionMode.FULL64,
    ledger: CommLedger | None = None,
    pass_: str = FORWARD,
) -> RankSet:
    """Rank m receives the cross-rank sum of token chunk m.

    The token dimension (all leading axes flattened) must be divisible
    by the rank count. Composing with all_gather reproduces all_reduce
    bit for bit.
    """
    chunks = _scatter_chunks(rs)
    summed = [
        _accumulate([c[m] for c in chunks], precision) for m in range(rs.m)
    ]
    if ledger is not None and rs.m > 1:
        ledger.record("reduce_scatter", pass_, precision.wire_bits, rs.tokens * rs.h)
    return RankSet(summed)


def all_gather(
    rs: RankSet,
    ledger: CommLedger | None = None,
    pass_: str = FORWARD,
    bits: int = 32,
) -> RankSet:
    """Every rank receives the concatenation of all ranks' chunks."""
    full = np.concatenate([t.reshape(-1, t.shape[-1]) for t in rs.tensors], axis=0)
    if ledger is not None and rs.m > 1:
        ledger.record("all_gather", pass_, bits, full.size)
    return RankSet([full.copy() for _ in range(rs.m)])


def _scatter_chunks(rs: RankSet) -> list[list[np.ndarray]]:
    tokens = rs.tokens
    if tokens % rs.m != 0:
        raise ValueError(
            f"token dimension {tokens} not divisible by {rs.m} ranks"
        )
    per = tokens // rs.m
    out = []
    for t in rs.tensors:
        flat = t.reshape(tokens, rs.h)
        out.append([flat[m * per : (m + 1) * per] for m in range(rs.m)])
    return out


def apply_mask(
    rs: RankSet, mask: MaskSpec, step: int
) -> tuple[RankSet, list[np.ndarray]]:
    """Zero all but floor(h * p) entries per token on every rank.

    Returns the masked RankSet and the boolean masks so the backward
    pass can reuse them. Random masks are drawn from a generator seeded
    by (seed, step, rank); top-k masks are deterministic by value.
    """
    k = mask.keep_count(rs.h)
    masked, masks = [], []
    for rank, t in enumerate(rs.tensors):
        flat = t.reshape(-1, rs.h)
        keep = np.zeros(flat.shape, dtype=bool)
        if k >= rs.h:
            keep[:] = True
        elif k > 0:
            if mask.kind == "topk":
                # stable sort on -|x| breaks ties toward the lower index
                order = np.argsort(-np.abs(flat), axis=1, kind="stable")[:, :k]
            else:
                rng = np.random.default_rng((mask.seed, _MASK_STREAM, step, rank))
                order = np.argsort(rng.random(flat.shape), axis=1)[:, :k]
            np.put_along_axis(keep, order, True, axis=1)
        keep = keep.reshape(t.shape)
        masked.append(np.where(keep, t, 0.0))
        masks.append(keep)
    return RankSet(masked), masks


def masked_all_reduce(
    rs: RankSet,
    keep_per_token: int,
    precision: PrecisionMode = PrecisionMode.FULL64,
    ledger: CommLedger | None = None,
    pass_: str = FORWARD,
) -> RankSet:
    """All-reduce of already-masked tensors, accounted as a compressed
    reduce-scatter (only kept entries travel) plus a full all-gather."""
    out = reduce_scatter(rs, precision, ledger=None)
    out = all_gather(out, ledger=None)
    if ledger is not None and rs.m > 1:
        bits = precision.wire_bits
        ledger.record("reduce_scatter", pass_, bits, rs.tokens * keep_per_token)
        ledger.record("all_gather", pass_, bits, rs.tokens * rs.h)
    return RankSet([t.reshape(rs.shape) for t in out])


def sync_param_grads(
    grads: list[np.ndarray],
    ledger: CommLedger | None = None,
    kind: str = "norm_grad_sync",
    precision: PrecisionMode = PrecisionMode.FULL64,
) -> np.ndarray:
    """All-reduce per-rank parameter-gradient contributions (ascending
    rank order) before the optimizer step; returns the summed gradient."""
    if len(grads) == 1:
        return grads[0].copy()
    total = _accumulate(grads, precision)
    if ledger is not None:
        ledger.record(kind, BACKWARD, precision.wire_bits, 2 * total.size)
    return total
