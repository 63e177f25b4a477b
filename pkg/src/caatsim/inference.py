"""Inference paths: simulated multi-rank execution and logical-device
execution on one simulated physical device.

A model trained with M ranks produces M distinct per-rank streams, so a
single device serves it by evaluating every logical rank sequentially
and replacing each collective with local summation. The simulator
already evaluates ranks sequentially with deterministic ascending-rank
sums, so the logical path is the same arithmetic with the communication
accounting turned off; outputs are bitwise equal to the ranked
execution by construction.
"""

from __future__ import annotations

import numpy as np

from caatsim.collectives import CommLedger
from caatsim.model import CaatModel

__all__ = ["ranked_logits", "logical_device_inference", "greedy_generate"]


def ranked_logits(
    model: CaatModel, tokens: np.ndarray, ledger: CommLedger | None = None
) -> np.ndarray:
    """Simulated M-rank forward; collectives are charged to the ledger."""
    return model.forward(np.atleast_2d(tokens), ledger=ledger).logits


def logical_device_inference(
    model: CaatModel, tokens: np.ndarray, ledger: CommLedger | None = None
) -> np.ndarray:
    """Evaluate all logical ranks on one simulated physical device.

    Collectives degenerate to local summation, so nothing is ever
    recorded on the ledger.
    """
    del ledger  # local summation: zero communicated elements
    return model.forward(np.atleast_2d(tokens), ledger=None).logits


def greedy_generate(
    model: CaatModel,
    prompt: np.ndarray,
    max_new: int,
    logical: bool = True,
    ledger: CommLedger | None = None,
) -> list[int]:
    """Greedy continuation of a prompt; the context window slides once
    the sequence exceeds the trained maximum length."""
    tokens = list(np.asarray(prompt, dtype=np.int64).ravel())
    if not tokens:
        raise ValueError("prompt must contain at least one token")
    out: list[int] = []
    run = logical_device_inference if logical else ranked_logits
    for _ in range(max_new):
        window = tokens[-model.max_seq :]
        logits = run(model, np.array([window]), ledger)
        nxt = int(np.argmax(logits[0, -1]))
        out.append(nxt)
        tokens.append(nxt)
    return out
