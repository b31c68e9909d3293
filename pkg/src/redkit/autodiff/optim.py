"""Adam optimizer, in functional and object form."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from redkit.errors import NonFiniteError, ShapeError


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **kw):
        return cls(np.zeros_like(param), np.zeros_like(param), **kw)


def adam_step(param, grad, state, lr):
    """One bias-corrected Adam update; returns ``(new_param, new_state)``.

    Inputs are not modified.
    """
    param = np.asarray(param)
    grad = np.asarray(grad)
    if grad.shape != param.shape or state.first_moment.shape != param.shape:
        raise ShapeError(f"adam_step: param {param.shape}, grad {grad.shape}, "
                         f"moments {state.first_moment.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("adam_step: non-finite gradient")
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m = b1 * state.first_moment + (1 - b1) * grad
    v = b2 * state.second_moment + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = param - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m.astype(param.dtype, copy=False), v.astype(param.dtype, copy=False),
                          t, b1, b2, state.epsilon)
    return new.astype(param.dtype, copy=False), new_state


class Adam:
    """Adam over a list of leaf tensors, updated in place from their ``.grad``."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.states = [AdamState.zeros_like(p.data, beta1=betas[0], beta2=betas[1], epsilon=eps)
                       for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data, self.states[i] = adam_step(p.data, p.grad, self.states[i], self.lr)
