"""AdamW with decoupled weight decay and a step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import Parameter
from .tensor import ContractError


def step_lr(base_lr: float, epoch: int, decay_epochs: Sequence[int], factor: float = 0.1) -> float:
    """Learning rate for ``epoch``: multiplied by ``factor`` once per decay epoch reached."""
    drops = sum(1 for e in decay_epochs if epoch >= e)
    return base_lr * factor**drops


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[Parameter], state: OptimizerState) -> None:
    """One AdamW update in place. Gradients are left for the caller to clear."""
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or '<unnamed>'} has no gradient")
    state.step_count += 1
    t = state.step_count
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, p in enumerate(params):
        key = p.name or str(i)
        m = state.first_moment.get(key)
        v = state.second_moment.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if m.shape != p.shape:
            raise ContractError(f"moment buffer for {key} has shape {m.shape}, parameter {p.shape}")
        g = p.grad
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[key] = m.astype(p.data.dtype, copy=False)
        state.second_moment[key] = v.astype(p.data.dtype, copy=False)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.data = (p.data * (1.0 - lr * state.weight_decay) - lr * update).astype(p.data.dtype, copy=False)
