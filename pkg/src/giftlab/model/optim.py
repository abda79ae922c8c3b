from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import DomainError


@dataclass
class OptimizerState:
    """AdamW moments and hyperparameters for one parameter vector."""

    n_params: int
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)
        if self.m.size != self.n_params or self.v.size != self.n_params:
            raise DomainError("moment arrays must match the parameter count")


def apply_update(model, grads, state: OptimizerState):
    """One bias-corrected AdamW step, applied to ``model.params`` in place.

    Weight decay is decoupled (``p -= lr * wd * p``). Non-finite gradients are
    rejected before anything is modified.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != model.params.shape or state.n_params != model.params.size:
        raise DomainError(f"gradient shape {grads.shape} != parameter shape {model.params.shape}")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise DomainError(f"non-finite gradient at index {bad}; update rejected")
    b1, b2 = state.betas
    state.step += 1
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads**2
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    if state.weight_decay:
        model.params *= 1 - state.lr * state.weight_decay
    model.params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return model, state
