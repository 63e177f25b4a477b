"""The full sharded language model: embeddings, layer stack, LM head.

Embeddings, norm parameters and the LM head are replicated across ranks
and therefore stored once; only the layer projections are sharded. The
final per-rank hidden states are combined by a full all-reduce followed
by division by the rank count, so the head sees their mean: shared
channels pass through unchanged and at shared_count == h the model is
numerically identical to the unsharded one. The loss region after that
reduce is replicated computation and is evaluated once.

Backward follows the configured placement. Under "h_after_norm" the
gradient streams are per-rank partial sums, so the gradients of every
replicated parameter (norm gammas, embeddings, positions) are summed
across ranks before the optimizer step, and that synchronization is
charged to the ledger. Under "g_before_norm" the streams are treated as
replicated, which is only correct at shared_count == h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from caatsim.collectives import (
    FORWARD,
    CommLedger,
    MaskSpec,
    PartialReduceSpec,
    RankSet,
    all_reduce,
    sync_param_grads,
)
from caatsim.kernels import PrecisionMode, rmsnorm, rmsnorm_backward, softmax_ce_loss
from caatsim.layers import (
    PLACEMENT_G,
    PLACEMENT_H,
    CaatLayer,
    layer_backward,
    layer_forward,
    shard_attention,
    shard_mlp,
    sync_norm_param_grads,
)

__all__ = ["CaatModel", "ForwardResult", "INIT_STD"]

INIT_STD = 0.02
_INIT_STREAM = 0x1217


@dataclass
class ForwardResult:
    loss: float | None
    logits: np.ndarray
    cache: "_ModelCache"


@dataclass
class _ModelCache:
    tokens: np.ndarray
    layer_caches: list
    h_final: np.ndarray
    nf: np.ndarray
    dlogits: np.ndarray | None
    mask_mode: bool


@dataclass
class CaatModel:
    embed: np.ndarray  # (vocab, h), replicated
    pos: np.ndarray  # (max_seq, h), replicated
    layers: list[CaatLayer]
    final_gamma: np.ndarray
    head: np.ndarray  # (h, vocab), replicated
    spec: PartialReduceSpec
    m: int

    @property
    def h(self) -> int:
        return self.embed.shape[1]

    @property
    def vocab(self) -> int:
        return self.embed.shape[0]

    @property
    def max_seq(self) -> int:
        return self.pos.shape[0]

    @property
    def n_heads(self) -> int:
        return self.layers[0].attn.n_heads

    @classmethod
    def init(
        cls,
        *,
        vocab: int,
        h: int,
        n_layers: int,
        n_heads: int,
        max_seq: int,
        m: int,
        spec: PartialReduceSpec,
        seed: int,
        std: float = INIT_STD,
    ) -> "CaatModel":
        """Seeded init. Full matrices are drawn first and then sharded,
        so the underlying weights are independent of the rank count."""
        if n_heads % m != 0:
            raise ValueError(f"{n_heads} heads not divisible by {m} ranks")
        if h % n_heads != 0:
            raise ValueError(f"hidden size {h} not divisible by {n_heads} heads")
        rng = np.random.default_rng((seed, _INIT_STREAM))
        draw = lambda *shape: rng.standard_normal(shape) * std
        embed = draw(vocab, h)
        pos = draw(max_seq, h)
        layers = []
        for _ in range(n_layers):
            wq, wk, wv, o = draw(h, h), draw(h, h), draw(h, h), draw(h, h)
            a, b = draw(h, 4 * h), draw(4 * h, h)
            layers.append(
                CaatLayer(
                    attn_gamma=np.ones(h),
                    mlp_gamma=np.ones(h),
                    attn=shard_attention(wq, wk, wv, o, n_heads, m, spec),
                    mlp=shard_mlp(a, b, m, spec),
                    spec=spec,
                )
            )
        head = draw(h, vocab)
        return cls(embed, pos, layers, np.ones(h), head, spec, m)

    def params(self) -> dict[str, np.ndarray]:
        """Flat name -> live array view of every trainable parameter."""
        out = {
            "embed": self.embed,
            "pos": self.pos,
            "final_gamma": self.final_gamma,
            "head": self.head,
        }
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.attn_gamma"] = layer.attn_gamma
            out[f"layers.{i}.mlp_gamma"] = layer.mlp_gamma
            for r in range(self.m):
                out[f"layers.{i}.attn.wq.{r}"] = layer.attn.wq[r]
                out[f"layers.{i}.attn.wk.{r}"] = layer.attn.wk[r]
                out[f"layers.{i}.attn.wv.{r}"] = layer.attn.wv[r]
                out[f"layers.{i}.attn.o_shared.{r}"] = layer.attn.o_shared[r]
                out[f"layers.{i}.attn.o_private.{r}"] = layer.attn.o_private[r]
                out[f"layers.{i}.mlp.a.{r}"] = layer.mlp.a_shards[r]
                out[f"layers.{i}.mlp.b_shared.{r}"] = layer.mlp.b_shared[r]
                out[f"layers.{i}.mlp.b_private.{r}"] = layer.mlp.b_private[r]
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        current = self.params()[name]
        if current.shape != value.shape:
            raise ValueError(
                f"extent mismatch for {name}: {current.shape} vs {value.shape}"
            )
        current[...] = value

    def forward(
        self,
        tokens: np.ndarray,
        targets: np.ndarray | None = None,
        ledger: CommLedger | None = None,
        mask_spec: MaskSpec | None = None,
        step: int = 0,
    ) -> ForwardResult:
        """Per-rank forward over all layers plus the replicated loss head.

        Forward collectives always accumulate in full 64-bit precision;
        the emulated 16-bit mode only applies to backward reductions.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        b, t = tokens.shape
        if t > self.max_seq:
            raise ValueError(f"sequence length {t} exceeds maximum {self.max_seq}")
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise ValueError(f"token id out of range [0, {self.vocab})")
        e = self.embed[tokens] + self.pos[:t]
        x = RankSet([e.copy() for _ in range(self.m)])
        layer_caches = []
        for layer in self.layers:
            x, cache = layer_forward(
                x, layer, ledger, PrecisionMode.FULL64, mask_spec, step
            )
            layer_caches.append(cache)
        reduced = all_reduce(x, PrecisionMode.FULL64, ledger, FORWARD)
        h_final = reduced[0] / self.m
        nf = rmsnorm(h_final, self.final_gamma)
        logits = (nf.reshape(-1, self.h) @ self.head).reshape(b, t, self.vocab)
        loss = dlogits = None
        if targets is not None:
            loss, dlogits = softmax_ce_loss(
                logits.reshape(-1, self.vocab), np.asarray(targets).reshape(-1)
            )
        return ForwardResult(
            loss,
            logits,
            _ModelCache(tokens, layer_caches, h_final, nf, dlogits, mask_spec is not None),
        )

    def backward(
        self,
        cache: _ModelCache,
        placement: str = PLACEMENT_H,
        ledger: CommLedger | None = None,
        precision: PrecisionMode = PrecisionMode.FULL64,
    ) -> dict[str, np.ndarray]:
        """Gradients for every parameter, already synchronized across
        ranks where the placement requires it."""
        if cache.dlogits is None:
            raise ValueError("backward needs a forward pass that computed the loss")
        if cache.mask_mode and placement != PLACEMENT_G:
            raise ValueError("mask baselines use the g_before_norm backward")
        b, t = cache.tokens.shape
        grads: dict[str, np.ndarray] = {}
        nf2 = cache.nf.reshape(-1, self.h)
        grads["head"] = nf2.T @ cache.dlogits
        dnf = (cache.dlogits @ self.head.T).reshape(b, t, self.h)
        dh_final, grads["final_gamma"] = rmsnorm_backward(
            cache.h_final, self.final_gamma, dnf
        )
        # Backward of the mean combine: under the partial-gradient
        # convention each rank's hidden receives 1/M of the logical
        # gradient; the replicated convention hands every rank all of it.
        if placement == PLACEMENT_H:
            up = RankSet([dh_final / self.m for _ in range(self.m)])
        else:
            up = RankSet([dh_final.copy() for _ in range(self.m)])
        for i in reversed(range(len(self.layers))):
            up, lg = layer_backward(up, cache.layer_caches[i], placement, ledger, precision)
            for r in range(self.m):
                grads[f"layers.{i}.attn.wq.{r}"] = lg.attn.wq[r]
                grads[f"layers.{i}.attn.wk.{r}"] = lg.attn.wk[r]
                grads[f"layers.{i}.attn.wv.{r}"] = lg.attn.wv[r]
                grads[f"layers.{i}.attn.o_shared.{r}"] = lg.attn.o_shared[r]
                grads[f"layers.{i}.attn.o_private.{r}"] = lg.attn.o_private[r]
                grads[f"layers.{i}.mlp.a.{r}"] = lg.mlp.a[r]
                grads[f"layers.{i}.mlp.b_shared.{r}"] = lg.mlp.b_shared[r]
                grads[f"layers.{i}.mlp.b_private.{r}"] = lg.mlp.b_private[r]
            if placement == PLACEMENT_H:
                grads[f"layers.{i}.attn_gamma"] = sync_norm_param_grads(lg.attn_gamma, ledger)
                grads[f"layers.{i}.mlp_gamma"] = sync_norm_param_grads(lg.mlp_gamma, ledger)
            else:
                grads[f"layers.{i}.attn_gamma"] = lg.attn_gamma[0]
                grads[f"layers.{i}.mlp_gamma"] = lg.mlp_gamma[0]
        grads["embed"], grads["pos"] = self._embedding_grads(
            cache.tokens, up, placement, ledger
        )
        return grads

    def _embedding_grads(self, tokens, up: RankSet, placement, ledger):
        per_rank_embed, per_rank_pos = [], []
        t = tokens.shape[1]
        for r in range(up.m):
            de = np.zeros_like(self.embed)
            np.add.at(de, tokens.reshape(-1), up[r].reshape(-1, self.h))
            per_rank_embed.append(de)
            dp = np.zeros_like(self.pos)
            dp[:t] = up[r].sum(axis=0)
            per_rank_pos.append(dp)
        if placement == PLACEMENT_H:
            # replicated tables accumulate per-rank partial sums; a real
            # system all-reduces the gradient tables before the update
            de = sync_param_grads(per_rank_embed, ledger, kind="param_grad_sync")
            dp = sync_param_grads(per_rank_pos, ledger, kind="param_grad_sync")
            return de, dp
        return per_rank_embed[0], per_rank_pos[0]
