"""Adam optimizer with bias correction, over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ContractError

DEFAULT_LEARNING_RATE = 1e-4


@dataclass
class AdamState:
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray],
                   learning_rate: float = DEFAULT_LEARNING_RATE) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update. Mutates `params` and `state` in place and returns them."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ContractError("adam_step: params, grads, and state keys differ")
    for k in params:
        if params[k].shape != grads[k].shape:
            raise ContractError(f"adam_step: shape mismatch for {k}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
    return params, state
