"""Sharded transformer layers synchronized by partial channel-reduce.

Weight layout over M ranks, hidden size h, shared count c = floor(h*p):

* MLP: the first projection (h, 4h) is split by columns, so rank m holds
  A_m of shape (h, 4h/M). The second projection (4h, h) is split by rows
  AND columns: rank m holds B_shared_m (4h/M, c) and B_private_m
  (4h/M, h-c). Shared-channel outputs are summed across ranks by the
  collective; private columns stay rank-local.
* Attention: rank m holds n_heads/M heads (query/key/value projections
  of shape (h, h/M)) and the matching row block of the output
  projection, split into O_shared_m (h/M, c) and O_private_m.

Backward placement: the gradient reduce can sit before the norm
backward ("g_before_norm", the classic fully-synchronized wiring, which
assumes every rank already carries the full logical gradient) or at the
position mirroring the forward reduce ("h_after_norm", which carries
per-rank partial gradients and requires norm-parameter gradients to be
summed across ranks before the optimizer step). Only the second is
correct when shared_count < h; the first is kept to demonstrate the
mismatch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from caatsim.collectives import (
    BACKWARD,
    CommLedger,
    MaskSpec,
    PartialReduceSpec,
    RankSet,
    all_reduce,
    apply_mask,
    masked_all_reduce,
    partial_channel_reduce,
    partial_channel_reduce_vjp,
    sync_param_grads,
)
from caatsim.kernels import (
    PrecisionMode,
    ShapeMismatchError,
    activation_backward,
    activation_with_cdf,
    rmsnorm,
    rmsnorm_backward,
)

__all__ = [
    "PLACEMENT_G",
    "PLACEMENT_H",
    "ShardedMlp",
    "ShardedAttention",
    "CaatLayer",
    "shard_mlp",
    "shard_attention",
    "mlp_forward",
    "mlp_backward",
    "attention_forward",
    "attention_backward",
    "layer_forward",
    "layer_backward",
    "sync_norm_param_grads",
    "MlpGrads",
    "AttnGrads",
    "LayerGrads",
]

PLACEMENT_G = "g_before_norm"
PLACEMENT_H = "h_after_norm"


@dataclass
class ShardedMlp:
    a_shards: list[np.ndarray]
    b_shared: list[np.ndarray]
    b_private: list[np.ndarray]

    @property
    def m(self) -> int:
        return len(self.a_shards)


@dataclass
class ShardedAttention:
    n_heads: int
    wq: list[np.ndarray]
    wk: list[np.ndarray]
    wv: list[np.ndarray]
    o_shared: list[np.ndarray]
    o_private: list[np.ndarray]

    @property
    def m(self) -> int:
        return len(self.wq)


@dataclass
class CaatLayer:
    attn_gamma: np.ndarray
    mlp_gamma: np.ndarray
    attn: ShardedAttention
    mlp: ShardedMlp
    spec: PartialReduceSpec


def shard_mlp(a: np.ndarray, b: np.ndarray, m: int, spec: PartialReduceSpec) -> ShardedMlp:
    """Split full (h, f) and (f, h) projections across m ranks."""
    h, f = a.shape
    if b.shape != (f, h):
        raise ShapeMismatchError(f"B {b.shape} does not match A {a.shape}")
    if f % m != 0:
        raise ValueError(f"ffn width {f} not divisible by {m} ranks")
    c = spec.shared_count
    fm = f // m
    a_shards, b_s, b_p = [], [], []
    for rank in range(m):
        rows = slice(rank * fm, (rank + 1) * fm)
        a_shards.append(a[:, rows].copy())
        b_s.append(b[rows, :c].copy())
        b_p.append(b[rows, c:].copy())
    return ShardedMlp(a_shards, b_s, b_p)


def shard_attention(
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    o: np.ndarray,
    n_heads: int,
    m: int,
    spec: PartialReduceSpec,
) -> ShardedAttention:
    """Split full (h, h) attention projections across m ranks by heads."""
    h = wq.shape[0]
    if n_heads % m != 0:
        raise ValueError(f"{n_heads} heads not divisible by {m} ranks")
    if h % n_heads != 0:
        raise ValueError(f"hidden size {h} not divisible by {n_heads} heads")
    c = spec.shared_count
    hm = h // m
    qs, ks, vs, os_, op = [], [], [], [], []
    for rank in range(m):
        cols = slice(rank * hm, (rank + 1) * hm)
        qs.append(wq[:, cols].copy())
        ks.append(wk[:, cols].copy())
        vs.append(wv[:, cols].copy())
        os_.append(o[cols, :c].copy())
        op.append(o[cols, c:].copy())
    return ShardedAttention(n_heads, qs, ks, vs, os_, op)


@dataclass
class MlpGrads:
    a: list[np.ndarray]
    b_shared: list[np.ndarray]
    b_private: list[np.ndarray]


@dataclass
class AttnGrads:
    wq: list[np.ndarray]
    wk: list[np.ndarray]
    wv: list[np.ndarray]
    o_shared: list[np.ndarray]
    o_private: list[np.ndarray]


@dataclass
class LayerGrads:
    attn: AttnGrads
    mlp: MlpGrads
    attn_gamma: list[np.ndarray]  # per-rank contributions; sum under placement h
    mlp_gamma: list[np.ndarray]


@dataclass
class _MlpCache:
    x2: list[np.ndarray]  # flattened block inputs per rank
    pre: list[np.ndarray]
    cdf: list[np.ndarray]  # normal CDF at pre, reused by the backward
    y: list[np.ndarray]
    out_shape: tuple
    spec: PartialReduceSpec
    mlp: ShardedMlp
    masks: list[np.ndarray] | None


@dataclass
class _AttnCache:
    x2: list[np.ndarray]
    q: list[np.ndarray]
    k: list[np.ndarray]
    v: list[np.ndarray]
    weights: list[np.ndarray]
    heads_out: list[np.ndarray]
    out_shape: tuple
    spec: PartialReduceSpec
    attn: ShardedAttention
    masks: list[np.ndarray] | None


@dataclass
class _LayerCache:
    x: RankSet
    attn_in: list[np.ndarray]  # pre-norm residual inputs, per rank
    mlp_in: list[np.ndarray]
    attn_cache: _AttnCache
    mlp_cache: _MlpCache
    layer: CaatLayer


def _reduce_block_output(
    ztilde: RankSet,
    spec: PartialReduceSpec,
    ledger: CommLedger | None,
    precision: PrecisionMode,
    mask_spec: MaskSpec | None,
    step: int,
) -> tuple[RankSet, list[np.ndarray] | None]:
    """Synchronize a block's per-rank outputs: partial channel-reduce, or
    mask-then-full-all-reduce for the compression baselines."""
    if mask_spec is None:
        return partial_channel_reduce(ztilde, spec, precision, ledger), None
    masked, masks = apply_mask(ztilde, mask_spec, step)
    out = masked_all_reduce(
        masked, mask_spec.keep_count(ztilde.h), precision, ledger
    )
    return out, masks


def mlp_forward(
    x: RankSet,
    mlp: ShardedMlp,
    spec: PartialReduceSpec,
    ledger: CommLedger | None = None,
    precision: PrecisionMode = PrecisionMode.FULL64,
    mask_spec: MaskSpec | None = None,
    step: int = 0,
) -> tuple[RankSet, _MlpCache]:
    h = spec.h
    if x.h != h:
        raise ShapeMismatchError(f"input h={x.h} but spec h={h}")
    x2s, pres, cdfs, ys, ztildes = [], [], [], [], []
    for rank in range(x.m):
        x2 = x[rank].reshape(-1, h)
        pre = x2 @ mlp.a_shards[rank]
        y, cdf = activation_with_cdf(pre)
        ztilde = np.concatenate(
            [y @ mlp.b_shared[rank], y @ mlp.b_private[rank]], axis=1
        )
        x2s.append(x2)
        pres.append(pre)
        cdfs.append(cdf)
        ys.append(y)
        ztildes.append(ztilde.reshape(x[rank].shape))
    z, masks = _reduce_block_output(
        RankSet(ztildes), spec, ledger, precision, mask_spec, step
    )
    return z, _MlpCache(x2s, pres, cdfs, ys, x.shape, spec, mlp, masks)


def mlp_backward(
    upstream: RankSet,
    cache: _MlpCache,
    placement: str,
    ledger: CommLedger | None = None,
    precision: PrecisionMode = PrecisionMode.FULL64,
) -> tuple[RankSet, MlpGrads]:
    if upstream.shape != cache.out_shape:
        raise ShapeMismatchError("upstream does not match cached forward")
    spec, mlp = cache.spec, cache.mlp
    dz = _block_output_vjp(upstream, cache.masks, spec, placement, ledger, precision)
    c = spec.shared_count
    dxs, das, dbss, dbps = [], [], [], []
    for rank in range(upstream.m):
        dz2 = dz[rank].reshape(-1, spec.h)
        dzs, dzp = dz2[:, :c], dz2[:, c:]
        y = cache.y[rank]
        dbss.append(y.T @ dzs)
        dbps.append(y.T @ dzp)
        dy = dzs @ mlp.b_shared[rank].T + dzp @ mlp.b_private[rank].T
        dpre = activation_backward(cache.pre[rank], dy, cdf=cache.cdf[rank])
        das.append(cache.x2[rank].T @ dpre)
        dxs.append((dpre @ mlp.a_shards[rank].T).reshape(cache.out_shape))
    dx = _block_input_reduce(RankSet(dxs), placement, ledger, precision)
    return dx, MlpGrads(das, dbss, dbps)


def attention_forward(
    x: RankSet,
    attn: ShardedAttention,
    spec: PartialReduceSpec,
    ledger: CommLedger | None = None,
    precision: PrecisionMode = PrecisionMode.FULL64,
    mask_spec: MaskSpec | None = None,
    step: int = 0,
) -> tuple[RankSet, _AttnCache]:
    h = spec.h
    if x.h != h:
        raise ShapeMismatchError(f"input h={x.h} but spec h={h}")
    if x[0].ndim != 3:
        raise ShapeMismatchError(f"attention expects (batch, seq, h), got {x.shape}")
    b, t, _ = x.shape
    heads_m = attn.n_heads // attn.m
    dh = h // attn.n_heads
    causal = _causal_mask(t)
    x2s, qs, ks, vs, ws, houts, ztildes = [], [], [], [], [], [], []
    for rank in range(x.m):
        x2 = x[rank].reshape(-1, h)
        # one fused projection for q, k and v
        qkv = x2 @ np.concatenate(
            [attn.wq[rank], attn.wk[rank], attn.wv[rank]], axis=1
        )
        width = qkv.shape[1] // 3
        q = _split_heads(qkv[:, :width], b, t, heads_m, dh)
        k = _split_heads(qkv[:, width : 2 * width], b, t, heads_m, dh)
        v = _split_heads(qkv[:, 2 * width :], b, t, heads_m, dh)
        scores = q @ k.swapaxes(-1, -2)
        scores /= math.sqrt(dh)
        scores += causal
        w = _softmax_last(scores)
        ctx = w @ v
        hout = _merge_heads(ctx)
        ztilde = np.concatenate(
            [hout @ attn.o_shared[rank], hout @ attn.o_private[rank]], axis=1
        )
        x2s.append(x2)
        qs.append(q)
        ks.append(k)
        vs.append(v)
        ws.append(w)
        houts.append(hout)
        ztildes.append(ztilde.reshape(x[rank].shape))
    z, masks = _reduce_block_output(
        RankSet(ztildes), spec, ledger, precision, mask_spec, step
    )
    return z, _AttnCache(x2s, qs, ks, vs, ws, houts, x.shape, spec, attn, masks)


def attention_backward(
    upstream: RankSet,
    cache: _AttnCache,
    placement: str,
    ledger: CommLedger | None = None,
    precision: PrecisionMode = PrecisionMode.FULL64,
) -> tuple[RankSet, AttnGrads]:
    if upstream.shape != cache.out_shape:
        raise ShapeMismatchError("upstream does not match cached forward")
    spec, attn = cache.spec, cache.attn
    b, t, h = cache.out_shape
    dh = h // attn.n_heads
    c = spec.shared_count
    dz = _block_output_vjp(upstream, cache.masks, spec, placement, ledger, precision)
    dxs = []
    grads = AttnGrads([], [], [], [], [])
    for rank in range(upstream.m):
        dz2 = dz[rank].reshape(-1, h)
        dzs, dzp = dz2[:, :c], dz2[:, c:]
        hout = cache.heads_out[rank]
        grads.o_shared.append(hout.T @ dzs)
        grads.o_private.append(hout.T @ dzp)
        dhout = dzs @ attn.o_shared[rank].T + dzp @ attn.o_private[rank].T
        heads_m = dhout.shape[1] // dh
        dctx = _split_heads(dhout, b, t, heads_m, dh)
        w, q, k, v = cache.weights[rank], cache.q[rank], cache.k[rank], cache.v[rank]
        dw = dctx @ v.swapaxes(-1, -2)
        dv = w.swapaxes(-1, -2) @ dctx
        dscores = w * (dw - np.sum(dw * w, axis=-1, keepdims=True))
        dq = dscores @ k / math.sqrt(dh)
        dk = dscores.swapaxes(-1, -2) @ q / math.sqrt(dh)
        dqkv = np.concatenate(
            [_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=1
        )
        x2 = cache.x2[rank]
        dw_fused = x2.T @ dqkv
        width = dqkv.shape[1] // 3
        grads.wq.append(dw_fused[:, :width])
        grads.wk.append(dw_fused[:, width : 2 * width])
        grads.wv.append(dw_fused[:, 2 * width :])
        w_fused = np.concatenate(
            [attn.wq[rank], attn.wk[rank], attn.wv[rank]], axis=1
        )
        dxs.append((dqkv @ w_fused.T).reshape(cache.out_shape))
    dx = _block_input_reduce(RankSet(dxs), placement, ledger, precision)
    return dx, grads


def layer_forward(
    x: RankSet,
    layer: CaatLayer,
    ledger: CommLedger | None = None,
    precision: PrecisionMode = PrecisionMode.FULL64,
    mask_spec: MaskSpec | None = None,
    step: int = 0,
) -> tuple[RankSet, _LayerCache]:
    """Pre-norm residual layer: x + Attn(norm(x)), then + Mlp(norm(.))."""
    attn_in = [t.copy() for t in x]
    n1 = RankSet([rmsnorm(t, layer.attn_gamma) for t in x])
    z1, attn_cache = attention_forward(
        n1, layer.attn, layer.spec, ledger, precision, mask_spec, step
    )
    mid = [a + z for a, z in zip(attn_in, z1)]
    n2 = RankSet([rmsnorm(t, layer.mlp_gamma) for t in mid])
    z2, mlp_cache = mlp_forward(
        n2, layer.mlp, layer.spec, ledger, precision, mask_spec, step
    )
    out = RankSet([a + z for a, z in zip(mid, z2)])
    return out, _LayerCache(x, attn_in, mid, attn_cache, mlp_cache, layer)


def layer_backward(
    upstream: RankSet,
    cache: _LayerCache,
    placement: str,
    ledger: CommLedger | None = None,
    precision: PrecisionMode = PrecisionMode.FULL64,
) -> tuple[RankSet, LayerGrads]:
    """Backward through one layer.

    Under h_after_norm the returned gamma gradients are per-rank partial
    sums that must go through sync_norm_param_grads before the optimizer
    step; under g_before_norm every rank already holds the same (at
    shared_count == h, correct) value.
    """
    layer = cache.layer
    dn2, mlp_grads = mlp_backward(upstream, cache.mlp_cache, placement, ledger, precision)
    dmid, dg_mlp = [], []
    for rank in range(upstream.m):
        dxa, dg = rmsnorm_backward(cache.mlp_in[rank], layer.mlp_gamma, dn2[rank])
        dmid.append(upstream[rank] + dxa)
        dg_mlp.append(dg)
    dn1, attn_grads = attention_backward(
        RankSet(dmid), cache.attn_cache, placement, ledger, precision
    )
    dx, dg_attn = [], []
    for rank in range(upstream.m):
        dxn, dg = rmsnorm_backward(cache.attn_in[rank], layer.attn_gamma, dn1[rank])
        dx.append(dmid[rank] + dxn)
        dg_attn.append(dg)
    return RankSet(dx), LayerGrads(attn_grads, mlp_grads, dg_attn, dg_mlp)


def sync_norm_param_grads(
    grads: list[np.ndarray], ledger: CommLedger | None = None
) -> np.ndarray:
    """All-reduce per-rank norm-parameter gradient contributions."""
    return sync_param_grads(grads, ledger, kind="norm_grad_sync")


def _block_output_vjp(
    upstream: RankSet,
    masks: list[np.ndarray] | None,
    spec: PartialReduceSpec,
    placement: str,
    ledger: CommLedger | None,
    precision: PrecisionMode,
) -> RankSet:
    """Gradient of the block's synchronization point.

    h_after_norm mirrors the forward reduce here (the only placement
    whose gradients are exact for shared_count < h). g_before_norm
    treats the forward reduce as identity in backward, like the classic
    fully-synchronized wiring. Mask baselines run the classic wiring
    with the saved forward mask re-applied.
    """
    if masks is not None:
        if placement != PLACEMENT_G:
            raise ValueError("mask baselines use the g_before_norm backward")
        return RankSet([np.where(m, u, 0.0) for u, m in zip(upstream, masks)])
    if placement == PLACEMENT_H:
        return partial_channel_reduce_vjp(upstream, spec, precision, ledger)
    if placement == PLACEMENT_G:
        return upstream
    raise ValueError(f"unknown placement {placement!r}")


def _block_input_reduce(
    dx: RankSet,
    placement: str,
    ledger: CommLedger | None,
    precision: PrecisionMode,
) -> RankSet:
    """g_before_norm reduces the block-input gradients here, before they
    reach the norm backward; h_after_norm leaves them per-rank."""
    if placement == PLACEMENT_G:
        return all_reduce(dx, precision, ledger, BACKWARD)
    return dx


def _split_heads(x2: np.ndarray, b: int, t: int, heads: int, dh: int) -> np.ndarray:
    return x2.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)


def _merge_heads(x4: np.ndarray) -> np.ndarray:
    b, heads, t, dh = x4.shape
    return x4.transpose(0, 2, 1, 3).reshape(b * t, heads * dh)


_CAUSAL_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    """Additive causal mask: -inf strictly above the diagonal."""
    mask = _CAUSAL_CACHE.get(t)
    if mask is None:
        mask = np.where(np.triu(np.ones((t, t), dtype=bool), k=1), -np.inf, 0.0)
        _CAUSAL_CACHE[t] = mask
    return mask


def _softmax_last(scores: np.ndarray) -> np.ndarray:
    # consumes its input buffer
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores
