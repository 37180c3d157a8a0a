"""AdamW: hand-checkable single steps plus convergence on a quadratic."""

from __future__ import annotations

import numpy as np
import pytest

from cora.optim import AdamW
from cora.tensor import Rng, Tensor, mul, sum_


def test_zero_grad_zero_decay_is_identity():
    p = Tensor(Rng(1).normal((3, 3)), requires_grad=True)
    before = p.data.copy()
    opt = AdamW([p], lr=0.1)
    p.grad = np.zeros_like(p.data)
    opt.step()
    assert np.array_equal(p.data, before)


def test_missing_grad_counts_as_zero():
    p = Tensor(np.ones(4), requires_grad=True)
    opt = AdamW([p], lr=0.1)
    opt.step()
    assert np.array_equal(p.data, np.ones(4))


def test_first_step_on_squared_weight():
    # w=1, loss w^2: g=2, m_hat=g, v_hat=g^2, so the step is almost exactly lr
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([w], lr=0.1)
    sum_(mul(w, w)).backward()
    opt.step()
    assert w.data[0] == pytest.approx(0.9000000005, abs=1e-12)


def test_quadratic_converges_in_200_steps():
    rng = Rng(0)
    target = rng.normal((5,))
    w = Tensor(rng.normal((5,)), requires_grad=True)
    opt = AdamW([w], lr=0.05)
    for _ in range(200):
        opt.zero_grad()
        diff = w - Tensor(target)
        sum_(mul(diff, diff)).backward()
        opt.step()
    assert np.abs(w.data - target).max() < 1e-3


def test_decoupled_decay_ignores_lr():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.0, weight_decay=0.1)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == pytest.approx(1.8, abs=0.0)


def test_coupled_decay_is_inert_at_lr_zero():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.0, weight_decay=0.1, decoupled=False)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == 2.0


def test_lr_setter_reaches_state():
    p = Tensor(np.ones(1), requires_grad=True)
    opt = AdamW([p], lr=1.0)
    opt.lr = 0.25
    assert opt.state.lr == 0.25


def test_same_seed_same_trajectory():
    def run():
        rng = Rng(7)
        w = Tensor(rng.normal((4,)), requires_grad=True)
        opt = AdamW([w], lr=0.01, weight_decay=0.01)
        for _ in range(20):
            opt.zero_grad()
            sum_(mul(w, w)).backward()
            opt.step()
        return w.data.copy()

    assert np.array_equal(run(), run())
