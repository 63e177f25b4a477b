"""AdamW with decoupled weight decay, over a flat name -> array dict.

Parameters are visited in sorted-name order and updated in place, so a
step is reproducible regardless of how the dict was assembled. Weight
decay applies to matrices and embedding tables only (anything with two
or more axes), never to norm gains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamWState", "adamw_step"]

ADAM_EPS = 1e-8


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict) -> "AdamWState":
        return cls(
            step=0,
            exp_avg={k: np.zeros_like(v) for k, v in params.items()},
            exp_avg_sq={k: np.zeros_like(v) for k, v in params.items()},
        )


def adamw_step(
    params: dict,
    grads: dict,
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = ADAM_EPS,
    weight_decay: float = 0.1,
) -> None:
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay != 0.0 and p.ndim >= 2:
            update = update + weight_decay * p
        p -= lr * update
