"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError


@dataclass
class AdamWState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kwargs) -> AdamWState:
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            **kwargs,
        )

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ContractError(f"betas must lie in (0, 1), got {self.betas}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ContractError("eps must be positive and weight_decay nonnegative")


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamWState,
    lr: float,
) -> tuple[Sequence[np.ndarray], AdamWState]:
    """Apply one AdamW update in place.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`` with
    bias-corrected moments. A missing gradient is treated as zero.
    """
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ContractError("params, grads and optimizer state differ in length")
    b1, b2 = state.betas
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.first_moment[i], state.second_moment[i]
        if m.shape != p.shape or v.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ContractError(f"shape mismatch for parameter {i}: {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr == 0.0:
            continue
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)
    return params, state
