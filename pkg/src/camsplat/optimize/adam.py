"""Adaptive moment estimation (bias-corrected), one state per parameter array."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from camsplat.autodiff import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, values: np.ndarray) -> AdamState:
        return cls(np.zeros_like(values), np.zeros_like(values))


def adam_step(values: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """In-place update of ``values`` and ``state``."""
    if grad.shape != values.shape or state.m.shape != values.shape:
        raise ValueError(f"adam_step: shape mismatch {values.shape}, {grad.shape}, {state.m.shape}")
    state.t += 1
    state.m *= BETA1
    state.m += (1 - BETA1) * grad
    state.v *= BETA2
    state.v += (1 - BETA2) * grad * grad
    m_hat = state.m / (1 - BETA1**state.t)
    v_hat = state.v / (1 - BETA2**state.t)
    values -= lr * m_hat / (np.sqrt(v_hat) + EPS)


@dataclass
class Adam:
    """Parameter groups with their own learning rates."""

    groups: list[tuple[list[Tensor], float]]
    states: dict[int, AdamState] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.zero_grad()

    def step(self) -> None:
        for params, lr in self.groups:
            for p in params:
                st = self.states.get(id(p))
                if st is None:
                    st = self.states[id(p)] = AdamState.like(p.values)
                adam_step(p.values, p.grad, st, lr)
