"""Shared test helpers: the finite-difference gradient oracle and fixtures."""

from __future__ import annotations

import numpy as np
import pytest

from scenedistill.tensor import Tape, Tensor, backward


def finite_difference(make_loss, flat: np.ndarray, index: int, step: float) -> float:
    """Central difference of the scalar closure w.r.t. one coordinate."""
    orig = flat[index]
    flat[index] = orig + step
    f1 = float(make_loss().data)
    flat[index] = orig - step
    f2 = float(make_loss().data)
    flat[index] = orig
    return (f1 - f2) / (2.0 * step)


def gradcheck(
    make_loss,
    params,
    n_coords: int = 20,
    step: float = 1e-5,
    rtol: float = 1e-5,
    atol: float = 1e-8,
    seed: int = 0,
) -> None:
    """Check tape gradients against central finite differences.

    ``make_loss`` must rebuild the scalar loss from scratch on every call
    (it is evaluated with perturbed parameter data and no active tape).
    A coordinate that fails at the primary step is re-checked at step/10 and
    step/100: a slope kink (relu/leaky) within the primary step biases the
    quotient, and the refinement is how those points are excluded.
    """
    named = params if isinstance(params, dict) else {f"p{i}": p for i, p in enumerate(params)}
    for p in named.values():
        p.grad = None
    with Tape() as tape:
        loss = make_loss()
    backward(loss, tape)
    f0 = abs(float(loss.data))
    atol_eff = max(atol, 3e-9 * f0)

    rng = np.random.default_rng(seed)
    failures = []
    for name, p in named.items():
        flat = p.data.reshape(-1)
        grad = np.zeros_like(flat) if p.grad is None else p.grad.reshape(-1)
        if flat.size <= n_coords:
            indices = np.arange(flat.size)
        else:
            indices = rng.choice(flat.size, size=n_coords, replace=False)
        for i in indices:
            analytic = grad[i]
            ok = False
            for h in (step, step / 10.0, step / 100.0):
                fd = finite_difference(make_loss, flat, i, h)
                if abs(analytic - fd) <= atol_eff + rtol * max(abs(analytic), abs(fd)):
                    ok = True
                    break
            if not ok:
                failures.append(f"{name}[{i}]: analytic={analytic:.6e} fd={fd:.6e}")
    assert not failures, "gradient mismatches:\n" + "\n".join(failures)
    for p in named.values():
        p.grad = None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, shape, scale=1.0, requires_grad=True, dtype=np.float64) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=requires_grad)
