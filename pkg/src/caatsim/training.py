"""Training and evaluation loop over the sharded model.

Everything an experiment emits is a pure function of (config, seed):
batches and masks come from counter-based generators keyed by the step,
so runs can be reproduced or resumed bit-for-bit from any checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from caatsim import data as data_mod
from caatsim.collectives import CommLedger, MaskSpec, PartialReduceSpec
from caatsim.kernels import PrecisionMode
from caatsim.layers import PLACEMENT_G, PLACEMENT_H
from caatsim.model import CaatModel
from caatsim.optim import AdamWState, adamw_step

__all__ = [
    "TrainConfig",
    "DivergenceError",
    "train_step",
    "evaluate",
    "run_training",
    "TrainResult",
    "metrics_csv",
    "METRICS_COLUMNS",
]

METRICS_COLUMNS = (
    "step",
    "train_loss",
    "val_loss",
    "comm_fwd_elems",
    "comm_bwd_elems",
    "norm_sync_elems",
)

EVAL_WINDOW_LIMIT = 256


class DivergenceError(RuntimeError):
    """Loss became non-finite; training aborted."""


@dataclass
class TrainConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    vocab: int = 256
    seq_len: int = 256
    batch: int = 8
    steps: int = 100
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    seed: int = 0
    p: float = 1.0
    tp: int = 1
    placement: str = "h"  # "h" (post-norm reduce) or "g" (pre-norm reduce)
    scale_private: bool = True
    accum: str = "full64"  # backward-reduce accumulation: full64 | emulated16
    mask: str = "none"  # none | topk | random
    data: str | None = None
    synthetic: bool = False
    synthetic_len: int = 200_000
    eval_every: int = 100
    out: str | None = None

    def validate(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if self.tp < 1:
            raise ValueError(f"tp must be >= 1, got {self.tp}")
        if self.heads % self.tp != 0:
            raise ValueError(f"{self.heads} heads not divisible by tp={self.tp}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.placement not in ("g", "h"):
            raise ValueError(f"placement must be g or h, got {self.placement!r}")
        if self.accum not in ("full64", "emulated16"):
            raise ValueError(f"accum must be full64 or emulated16, got {self.accum!r}")
        if self.mask not in ("none", "topk", "random"):
            raise ValueError(f"mask must be none, topk or random, got {self.mask!r}")
        if self.mask != "none" and self.placement != "g":
            raise ValueError("mask baselines use vanilla backward: set placement g")
        if self.steps < 0 or self.seq_len < 1 or self.batch < 1:
            raise ValueError("steps, seq_len and batch must be positive")
        if self.data is not None and self.synthetic:
            raise ValueError("choose either a data path or synthetic data")

    def reduce_spec(self) -> PartialReduceSpec:
        # Mask baselines keep the vanilla fully-reduced layer; p controls
        # the mask keep-fraction instead of the shared-channel count.
        if self.mask != "none":
            return PartialReduceSpec(p=1.0, h=self.hidden, scale_private=False, r=self.tp)
        return PartialReduceSpec(
            p=self.p, h=self.hidden, scale_private=self.scale_private, r=self.tp
        )

    def mask_spec(self) -> MaskSpec | None:
        if self.mask == "none":
            return None
        return MaskSpec(kind=self.mask, p=self.p, seed=self.seed)

    def placement_name(self) -> str:
        return PLACEMENT_H if self.placement == "h" else PLACEMENT_G

    def accum_precision(self) -> PrecisionMode:
        return PrecisionMode(self.accum)

    def build_model(self) -> CaatModel:
        return CaatModel.init(
            vocab=self.vocab,
            h=self.hidden,
            n_layers=self.layers,
            n_heads=self.heads,
            max_seq=self.seq_len,
            m=self.tp,
            spec=self.reduce_spec(),
            seed=self.seed,
        )

    def load_tokens(self) -> np.ndarray:
        if self.data is not None:
            return data_mod.ingest_corpus(self.data)
        return data_mod.synth_data(self.seed, self.vocab, self.synthetic_len)


def train_step(
    model: CaatModel,
    batch: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    ledger: CommLedger,
    opt_state: AdamWState,
) -> float:
    """One optimization step; returns the training loss."""
    x, y = batch
    result = model.forward(
        x, y, ledger=ledger, mask_spec=config.mask_spec(), step=opt_state.step
    )
    if not math.isfinite(result.loss):
        raise DivergenceError(
            f"non-finite loss {result.loss} at step {opt_state.step + 1}"
        )
    grads = model.backward(
        result.cache,
        config.placement_name(),
        ledger=ledger,
        precision=config.accum_precision(),
    )
    adamw_step(
        model.params(),
        grads,
        opt_state,
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    return result.loss


EVAL_CHUNK = 16


def evaluate(
    model: CaatModel,
    val_tokens: np.ndarray,
    config: TrainConfig,
    limit: int = EVAL_WINDOW_LIMIT,
) -> float:
    """Mean loss per token over held-out windows. Pure: no parameter
    mutation, no ledger. Windows are weighted by size so the result does
    not depend on how they are chunked into forward passes."""
    if len(val_tokens) < config.seq_len + 1:
        raise ValueError("validation stream shorter than one window")
    windows = data_mod.eval_windows(val_tokens, config.seq_len, limit)
    total, count = 0.0, 0
    for i in range(0, len(windows), EVAL_CHUNK):
        chunk = windows[i : i + EVAL_CHUNK]
        result = model.forward(
            chunk[:, :-1], chunk[:, 1:], ledger=None, mask_spec=config.mask_spec()
        )
        total += result.loss * len(chunk)
        count += len(chunk)
    return total / count


@dataclass
class TrainResult:
    model: CaatModel
    opt_state: AdamWState
    ledger: CommLedger
    rows: list[dict]
    final_val_loss: float
    train_tokens: np.ndarray = field(repr=False, default=None)
    val_tokens: np.ndarray = field(repr=False, default=None)


def run_training(
    config: TrainConfig,
    model: CaatModel | None = None,
    opt_state: AdamWState | None = None,
    start_step: int = 0,
    ledger: CommLedger | None = None,
) -> TrainResult:
    """Run (or resume) a training loop and collect per-step metrics.

    The comm columns are cumulative elements per rank: forward-pass
    collectives, backward activation-gradient collectives, and the
    norm-parameter gradient synchronization, respectively.
    """
    config.validate()
    tokens = config.load_tokens()
    train_tokens, val_tokens = data_mod.train_val_split(tokens)
    if model is None:
        model = config.build_model()
    if opt_state is None:
        opt_state = AdamWState.for_params(model.params())
    if ledger is None:
        ledger = CommLedger()
    rows: list[dict] = []

    def comm_snapshot() -> dict:
        norm_sync = ledger.elements(kind="norm_grad_sync")
        param_sync = ledger.elements(kind="param_grad_sync")
        return {
            "comm_fwd_elems": ledger.elements(pass_="forward"),
            "comm_bwd_elems": ledger.elements(pass_="backward") - norm_sync - param_sync,
            "norm_sync_elems": norm_sync,
        }

    if start_step == 0:
        rows.append(
            {
                "step": 0,
                "train_loss": "",
                "val_loss": evaluate(model, val_tokens, config),
                **comm_snapshot(),
            }
        )
    val_loss = None
    for step in range(start_step + 1, config.steps + 1):
        batch = data_mod.sample_batch(
            train_tokens, config.seq_len, config.batch, config.seed, step
        )
        loss = train_step(model, batch, config, ledger, opt_state)
        is_eval = (config.eval_every > 0 and step % config.eval_every == 0) or (
            step == config.steps
        )
        if is_eval:
            val_loss = evaluate(model, val_tokens, config)
        rows.append(
            {
                "step": step,
                "train_loss": loss,
                "val_loss": val_loss if is_eval else "",
                **comm_snapshot(),
            }
        )
    if val_loss is None:
        val_loss = evaluate(model, val_tokens, config)
    return TrainResult(model, opt_state, ledger, rows, val_loss, train_tokens, val_tokens)


def metrics_csv(rows: list[dict]) -> str:
    lines = [",".join(METRICS_COLUMNS)]
    for row in rows:
        lines.append(",".join(_format_cell(row[c]) for c in METRICS_COLUMNS))
    return "\n".join(lines) + "\n"


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)
