"""Adam with bias correction over an explicit parameter list."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor, _check_finite


class AdamState:
    """First/second moment buffers plus step counter for a parameter list.

    The parameter order fixed at construction must match the order passed
    to every :func:`adam_step` call. Parameters with ``requires_grad=False``
    (frozen) are skipped by the update.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self._n_params = len(params)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    if len(params) != state._n_params:
        raise ContractError(
            f"adam_step got {len(params)} params but state was built for {state._n_params}"
        )
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, p in enumerate(params):
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {i} has no gradient")
        g = p.grad
        if state.m[i].shape != p.data.shape:
            raise ContractError(f"adam_step: parameter {i} shape changed since state creation")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        _check_finite(p.data, "adam_step update")
        p.grad = None
