"""Adam optimizer behavior."""

from __future__ import annotations

import numpy as np
import pytest

import scenedistill.tensor as T
from scenedistill.errors import ContractError
from scenedistill.optim import AdamState, adam_step
from scenedistill.tensor import Tape, Tensor, backward, parameter


def test_zero_gradient_leaves_parameters_unchanged():
    p = parameter(np.array([1.0, -2.0, 3.0]))
    state = AdamState([p], lr=0.1)
    p.grad = np.zeros(3)
    adam_step([p], state)
    assert np.array_equal(p.data, [1.0, -2.0, 3.0])
    assert state.step_count == 1


def test_first_step_is_bias_corrected():
    p = parameter(np.array([0.5]))
    state = AdamState([p], lr=0.1)
    p.grad = np.ones(1)
    adam_step([p], state)
    # bias-corrected first step moves by ~lr regardless of gradient magnitude
    assert np.isclose(p.data[0], 0.5 - 0.1, atol=1e-6)
    assert p.grad is None


def test_missing_gradient_is_contract_error():
    p = parameter(np.array([1.0]))
    state = AdamState([p], lr=0.1)
    with pytest.raises(ContractError):
        adam_step([p], state)


def test_frozen_parameter_skipped_bitwise():
    p = parameter(np.array([1.0, 2.0]))
    frozen = parameter(np.array([5.0, 6.0]))
    frozen.requires_grad = False
    state = AdamState([p, frozen], lr=0.1)
    before = frozen.data.copy()
    for _ in range(10):
        p.grad = np.ones(2)
        adam_step([p, frozen], state)
    assert np.array_equal(frozen.data, before)
    assert not np.array_equal(p.data, [1.0, 2.0])


def test_quadratic_bowl_converges():
    rng = np.random.default_rng(17)
    w = parameter(rng.standard_normal(8))
    state = AdamState([w], lr=0.05)
    for _ in range(200):
        with Tape() as tape:
            loss = T.reduce_sum(T.mul(w, w))
        backward(loss, tape)
        adam_step([w], state)
    assert np.linalg.norm(w.data) < 1e-3
