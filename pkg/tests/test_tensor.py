"""Autodiff core: forward values, analytic gradients, finite differences."""

from __future__ import annotations

import math

import numpy as np
import pytest

from cora.tensor import (
    NumericsError,
    Rng,
    ShapeError,
    Tensor,
    bce_loss,
    broadcast_to,
    clamp,
    concat,
    cross_entropy_logits,
    grad_check,
    index_select,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    rms_norm,
    select_position,
    sigmoid,
    silu,
    softmax,
    sum_,
    take_columns,
    transpose,
)


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(matmul(a, b).data, b.data)


def test_matmul_row_column():
    got = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert got.data.tolist() == [[11.0]]


def test_matmul_grad_matches_analytic():
    rng = Rng(7)
    a = Tensor(rng.normal((5, 7)), requires_grad=True)
    b = Tensor(rng.normal((7, 3)), requires_grad=True)
    sum_(matmul(a, b)).backward()
    ones = np.ones((5, 3))
    assert np.allclose(a.grad, ones @ b.data.T, atol=1e-12)
    assert np.allclose(b.grad, a.data.T @ ones, atol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_softmax_uniform_is_exact():
    out = softmax(Tensor([[0.0, 0.0]]))
    assert out.data.tolist() == [[0.5, 0.5]]


def test_softmax_extreme_logits_stable():
    out = softmax(Tensor([[1000.0, 0.0]]))
    assert np.allclose(out.data, [[1.0, 0.0]], atol=1e-12)
    assert np.isfinite(out.data).all()


def test_softmax_rows_sum_to_one():
    rng = Rng(3)
    out = softmax(Tensor(rng.normal((6, 8)) * 50))
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_mask_zeroes_blocked_slots():
    mask = np.array([[True, False, True]])
    out = softmax(Tensor([[1.0, 2.0, 3.0]]), mask=mask)
    assert out.data[0, 1] == 0.0
    assert np.allclose(out.data.sum(), 1.0, atol=1e-12)


def test_softmax_fully_masked_row_rejected():
    with pytest.raises(NumericsError):
        softmax(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))


def test_softmax_jacobian_finite_difference():
    x = Tensor(np.array([0.3, -1.2, 0.7]), requires_grad=True)
    w = Rng(11).normal((3,))
    err = grad_check(lambda: sum_(mul(softmax(x), w)), [x])
    assert err < 1e-6


def test_rms_norm_hand_case():
    out = rms_norm(Tensor([[3.0, -3.0]]), Tensor(np.ones(2)), eps=0.0)
    assert out.data.tolist() == [[1.0, -1.0]]


def test_rms_norm_zero_vector_stays_zero():
    out = rms_norm(Tensor([[0.0, 0.0]]), Tensor(np.ones(2)))
    assert out.data.tolist() == [[0.0, 0.0]]


def test_rms_norm_gain_shape_checked():
    with pytest.raises(ShapeError):
        rms_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)))


def test_bce_half_is_log_two():
    loss = bce_loss(Tensor([0.5]), [1.0])
    assert loss.data == pytest.approx(math.log(2.0), rel=1e-15)


def test_bce_clamp_keeps_confident_prediction_finite():
    loss = bce_loss(Tensor([1.0 - 1e-7]), [1.0])
    assert loss.data == pytest.approx(1.0000000494736474e-07, rel=1e-12)
    saved = bce_loss(Tensor([1.0]), [1.0])
    assert np.isfinite(saved.data)


def test_bce_sigmoid_gradient_is_p_minus_y_over_batch():
    z = Tensor(np.array([0.2, -1.5, 3.0, 0.0]), requires_grad=True)
    p = sigmoid(z)
    y = np.array([1.0, 0.0, 1.0, 0.0])
    bce_loss(p, y).backward()
    assert np.allclose(z.grad, (p.data - y) / 4.0, atol=1e-15)


def test_bce_rejects_soft_labels_and_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(Tensor([0.5]), [0.3])
    with pytest.raises(ShapeError):
        bce_loss(Tensor([0.5, 0.5]), [1.0])


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((1, 2, 5)), requires_grad=True)
    loss = cross_entropy_logits(logits, np.array([[1, 3]]))
    assert loss.data == pytest.approx(math.log(5.0), rel=1e-15)


def test_cross_entropy_mask_drops_positions():
    rng = Rng(5)
    logits = Tensor(rng.normal((1, 3, 4)))
    tgt = np.array([[0, 1, 2]])
    keep_first = cross_entropy_logits(logits, tgt, mask=np.array([[True, False, False]]))
    only_first = cross_entropy_logits(Tensor(logits.data[:, :1]), tgt[:, :1])
    assert keep_first.data == pytest.approx(only_first.data, rel=1e-14)
    with pytest.raises(NumericsError):
        cross_entropy_logits(logits, tgt, mask=np.zeros((1, 3), dtype=bool))


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NumericsError):
        (t + 1.0).backward()


def test_no_grad_suppresses_graph():
    t = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = sigmoid(t)
    assert not out.requires_grad
    out2 = sigmoid(t)
    assert out2.requires_grad


def test_grad_check_quadratic():
    rng = Rng(1)
    w = Tensor(rng.normal((4, 3)), requires_grad=True)
    assert grad_check(lambda: sum_(mul(w, w)), [w]) < 1e-8


def test_grad_check_constant_loss_zero_error():
    w = Tensor(np.ones(3), requires_grad=True)
    assert grad_check(lambda: Tensor(2.5), [w]) < 1e-7


def test_every_op_passes_finite_difference():
    """One FD check per differentiable op, random inputs with extents <= 8.

    Constants are hoisted out of the closures so repeated evaluations inside
    grad_check see identical values.
    """
    rng = Rng(42)
    sp = rng.normal((6, 6))
    idx = np.array([2, 0, 5, 2])
    pos = np.array([1, 0, 2])
    cols = np.array([3, 1])
    tgt = np.array([[1, 0], [2, 3]])
    ybin = np.array([1.0, 0.0, 1.0, 0.0, 1.0])
    gain = Tensor(rng.normal((4,)) * 0.1 + 1.0, requires_grad=True)

    def fresh(shape):
        return Tensor(rng.normal(shape), requires_grad=True)

    cases = []
    a = fresh((5, 4))
    b = fresh((5, 4))
    cases.append(("add", lambda: sum_(a + b), [a, b]))
    cases.append(("sub", lambda: sum_(a - b), [a, b]))
    cases.append(("mul", lambda: sum_(mul(a, b)), [a, b]))
    cases.append(("neg", lambda: sum_(-a), [a]))
    c = fresh((5, 6))
    d = fresh((6, 4))
    cases.append(("matmul", lambda: sum_(mul(matmul(c, d), 2.0)), [c, d]))
    e = fresh((2, 3, 4))
    cases.append(("transpose", lambda: sum_(mul(transpose(e, (2, 0, 1)), 2.0)), [e]))
    cases.append(("reshape", lambda: sum_(mul(reshape(e, (6, 4)), 3.0)), [e]))
    f = fresh((1, 4))
    cases.append(("broadcast_to", lambda: sum_(mul(broadcast_to(f, (3, 4)), 0.5)), [f]))
    g1 = fresh((2, 3))
    g2 = fresh((4, 3))
    cases.append(("concat", lambda: sum_(mul(concat([g1, g2], axis=0), 1.5)), [g1, g2]))
    h = fresh((6, 4))
    cases.append(("index_select", lambda: sum_(mul(index_select(h, idx), 2.0)), [h]))
    i = fresh((3, 5, 4))
    cases.append(("select_position", lambda: sum_(mul(select_position(i, pos), 1.2)), [i]))
    j = fresh((3, 5))
    cases.append(("take_columns", lambda: sum_(take_columns(j, cols)), [j]))
    k = fresh((6, 4))
    cases.append(("sparse_matmul", lambda: sum_(_sparse(sp, k)), [k]))
    m = fresh((4, 5))
    cases.append(("sum_axis", lambda: sum_(mul(sum_(m, axis=1), 2.0)), [m]))
    cases.append(("mean", lambda: mul(mean(m), 7.0), [m]))
    n = fresh((5,))
    cases.append(("sigmoid", lambda: sum_(sigmoid(n)), [n]))
    cases.append(("silu", lambda: sum_(silu(n)), [n]))
    o = Tensor(np.abs(Rng(9).normal((5,))) + 0.5, requires_grad=True)
    cases.append(("log", lambda: sum_(log(o)), [o]))
    # interior points only: the clamp kink is not finite-differentiable
    p = Tensor(np.array([-0.4, 0.1, 0.45]), requires_grad=True)
    cases.append(("clamp", lambda: sum_(clamp(p, -0.5, 0.5)), [p]))
    q = fresh((4, 6))
    cases.append(("softmax", lambda: sum_(mul(softmax(q), Rng(8).normal((6,)))), [q]))
    r = fresh((3, 4))
    cases.append(("rms_norm", lambda: sum_(mul(rms_norm(r, gain), 1.1)), [r, gain]))
    s = fresh((5,))
    cases.append(("bce", lambda: bce_loss(sigmoid(s), ybin), [s]))
    t = fresh((2, 2, 4))
    cases.append(("cross_entropy", lambda: cross_entropy_logits(t, tgt), [t]))

    worst = 0.0
    for name, loss_fn, params in cases:
        err = grad_check(loss_fn, params)
        assert err < 1e-4, f"{name}: finite-difference error {err:.3e}"
        worst = max(worst, err)
    assert worst < 1e-4


def _sparse(dense, x):
    from scipy.sparse import csr_matrix

    from cora.tensor import sparse_matmul

    return sparse_matmul(csr_matrix(dense), x)


def test_composition_gradient():
    rng = Rng(17)
    w = Tensor(rng.normal((6, 6)), requires_grad=True)
    x = Tensor(rng.normal((3, 6)))
    gain = Tensor(np.ones(6), requires_grad=True)

    def loss():
        h = rms_norm(matmul(x, w), gain)
        return bce_loss(sigmoid(sum_(h, axis=1)), np.array([1.0, 0.0, 1.0]))

    assert grad_check(loss, [w, gain]) < 1e-5


def test_rng_streams_are_deterministic():
    a, b = Rng(123), Rng(123)
    assert np.array_equal(a.normal((4, 4)), b.normal((4, 4)))
    assert a.randint(1000) == b.randint(1000)
    perm = Rng(5).permutation(50)
    assert sorted(perm.tolist()) == list(range(50))


def test_rng_uniform_bounds_and_choice():
    r = Rng(2)
    u = r.uniform((1000,))
    assert (u > 0.0).all() and (u <= 1.0).all()
    c = Rng(3).choice(10, 10)
    assert sorted(c.tolist()) == list(range(10))
    with pytest.raises(ValueError):
        Rng(4).choice(3, 4)


def test_rng_shuffle_reproducible():
    xs, ys = list(range(12)), list(range(12))
    Rng(9).shuffle(xs)
    Rng(9).shuffle(ys)
    assert xs == ys and xs != list(range(12))
