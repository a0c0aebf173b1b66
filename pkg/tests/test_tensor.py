"""Tensor core: forward semantics, tape behaviour, finite-difference checks."""

import math

import numpy as np
import pytest

from hyperadapters import tensor as T
from hyperadapters.gradcheck import finite_difference_grad, relative_error
from hyperadapters.tensor import (
    DegenerateInputError,
    ShapeError,
    Tape,
    Tensor,
    backward,
)


def _grad_of(build, x0, h=1e-3):
    """Analytic grad of scalar build(x) wrt x, plus the FD oracle value.

    The analytic pass runs at the input's own precision; the oracle
    evaluates the forward in float64 so the comparison is limited by the
    gradient under test, not by oracle round-off.
    """
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        loss = build(x)
    backward(loss, tape)

    def f(arr):
        return build(Tensor(arr, dtype=np.float64)).item()

    fd = finite_difference_grad(f, x0.astype(np.float64), h=h)
    return x.grad, fd


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = Tensor(np.eye(2, dtype=np.float32))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, b.data)


def test_matmul_hand_value():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    np.testing.assert_allclose(T.matmul(a, b).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_vs_finite_differences():
    rng = np.random.default_rng(0)
    b0 = rng.uniform(-2, 2, size=(4, 3)).astype(np.float32)

    for seed in range(5):
        rng = np.random.default_rng(seed)
        a0 = rng.uniform(-2, 2, size=(5, 4)).astype(np.float32)
        g, fd = _grad_of(lambda x: T.sum_all(T.matmul(x, Tensor(b0))), a0)
        assert relative_error(g, fd) < 1e-3


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 2, 4)).astype(np.float32)
    b = rng.standard_normal((3, 4, 5)).astype(np.float32)
    out = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(3):
        np.testing.assert_allclose(out[i], a[i] @ b[i], rtol=1e-6)


# ---------------------------------------------------------------------------
# relu


def test_relu_sign_cases():
    y = T.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])


def test_relu_all_negative():
    y = T.relu(Tensor([-3.0, -0.5, -1e-4]))
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 0.0])


def test_relu_grad_away_from_kink():
    rng = np.random.default_rng(7)
    x0 = rng.uniform(-2, 2, size=(6, 6)).astype(np.float32)
    x0[np.abs(x0) < 1e-2] = 0.5  # keep clear of the non-smooth point
    g, fd = _grad_of(lambda x: T.sum_all(T.relu(x)), x0)
    assert relative_error(g, fd) < 1e-3


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.relu(x))
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


# ---------------------------------------------------------------------------
# layer_norm


def test_layer_norm_constant_row_maps_to_bias():
    x = Tensor([[5.0, 5.0, 5.0, 5.0]])
    gain = Tensor(np.ones(4, dtype=np.float32))
    bias = Tensor(np.zeros(4, dtype=np.float32))
    np.testing.assert_allclose(T.layer_norm(x, gain, bias).data, np.zeros((1, 4)), atol=1e-3)


def test_layer_norm_two_point_row():
    # mean 2, variance 1: normalizes to [-1, 1] up to eps
    x = Tensor([[1.0, 3.0]])
    y = T.layer_norm(x, Tensor(np.ones(2, dtype=np.float32)), Tensor(np.zeros(2, dtype=np.float32)))
    np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_statistics():
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(-2, 2, size=(16, 32)).astype(np.float32))
    y = T.layer_norm(x, Tensor(np.ones(32, dtype=np.float32)), Tensor(np.zeros(32, dtype=np.float32)))
    mu = y.data.mean(axis=1)
    var = y.data.var(axis=1)
    assert np.abs(mu).max() < 1e-5
    assert np.abs(var - 1.0).max() < 1e-3


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_layer_norm_grad_vs_finite_differences():
    rng = np.random.default_rng(11)
    x0 = rng.uniform(-2, 2, size=(4, 6)).astype(np.float32)
    w = Tensor(rng.uniform(0.5, 1.5, size=6).astype(np.float32))
    b = Tensor(rng.uniform(-0.5, 0.5, size=6).astype(np.float32))
    proj = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
    g, fd = _grad_of(lambda x: T.sum_all(T.mul(T.layer_norm(x, w, b), proj)), x0)
    assert relative_error(g, fd) < 1e-3


# ---------------------------------------------------------------------------
# softmax / cross-entropy


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    y = T.softmax(Tensor(rng.uniform(-4, 4, size=(8, 11)).astype(np.float32)))
    np.testing.assert_allclose(y.data.sum(axis=1), np.ones(8), atol=1e-6)


def test_cross_entropy_peaked_logits():
    logits = np.zeros((3, 5), dtype=np.float32)
    targets = np.array([1, 2, 4])
    logits[np.arange(3), targets] = 20.0
    loss = T.softmax_cross_entropy(Tensor(logits), targets, ignore_id=-1)
    assert loss.item() < 1e-6


def test_cross_entropy_uniform_logits_is_log_v():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((4, 8), dtype=np.float32)), [0, 3, 5, 7], ignore_id=-1)
    assert abs(loss.item() - math.log(8)) < 1e-6


def test_cross_entropy_all_ignored_is_zero_with_zero_grad():
    logits = Tensor(np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32), requires_grad=True)
    with Tape() as tape:
        loss = T.softmax_cross_entropy(logits, [9, 9, 9], ignore_id=9)
    assert loss.item() == 0.0
    backward(loss, tape)
    np.testing.assert_array_equal(logits.grad, np.zeros((3, 5)))


def test_cross_entropy_target_out_of_vocab():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 4), dtype=np.float32)), [0, 4], ignore_id=-1)


def test_cross_entropy_grad_vs_finite_differences():
    rng = np.random.default_rng(13)
    x0 = rng.uniform(-2, 2, size=(6, 7)).astype(np.float32)
    targets = rng.integers(0, 7, size=6)
    targets[2] = 9  # one ignored position
    g, fd = _grad_of(lambda x: T.softmax_cross_entropy(x, targets, ignore_id=9), x0)
    assert relative_error(g, fd) < 1e-3


# ---------------------------------------------------------------------------
# mean_pool


def test_mean_pool_identical_rows():
    r = np.array([2.0, -1.0, 0.5], dtype=np.float32)
    x = Tensor(np.tile(r, (4, 1)))
    np.testing.assert_allclose(T.mean_pool(x).data, r, rtol=1e-6)


def test_mean_pool_hand_value():
    x = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(T.mean_pool(x).data, [0.5, 0.5])


def test_mean_pool_mask_matches_kept_rows():
    rng = np.random.default_rng(17)
    x = rng.standard_normal((5, 3)).astype(np.float32)
    mask = np.array([True, False, True, True, False])
    got = T.mean_pool(Tensor(x), mask).data
    np.testing.assert_allclose(got, x[mask].mean(axis=0), rtol=1e-6)


def test_mean_pool_all_masked_raises():
    with pytest.raises(DegenerateInputError):
        T.mean_pool(Tensor(np.ones((3, 2))), np.zeros(3, dtype=bool))


def test_mean_pool_batched_grad():
    rng = np.random.default_rng(19)
    x0 = rng.uniform(-2, 2, size=(2, 4, 3)).astype(np.float32)
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    g, fd = _grad_of(lambda x: T.sum_all(T.mean_pool(x, mask)), x0)
    assert relative_error(g, fd) < 1e-3


# ---------------------------------------------------------------------------
# tape / backward semantics


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_fanout_accumulates():
    x = Tensor([1.0, -2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.add(x, x))
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_double_backward_doubles_linear_graph():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.scale(x, 3.0))
    backward(loss, tape)
    first = x.grad.copy()
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, 2.0 * first)


def test_backward_rejects_non_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.add(x, x)
    with pytest.raises(ShapeError):
        backward(y, tape)


def test_no_grad_without_requires_grad():
    x = Tensor([1.0, 2.0], requires_grad=False)
    w = Tensor([2.0, 0.5], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.mul(x, w))
    backward(loss, tape)
    assert x.grad is None
    np.testing.assert_array_equal(w.grad, [1.0, 2.0])


def test_composite_expression_grad_many_seeds():
    """Composite graph (matmul, relu, layer_norm, softmax, pool) vs FD."""
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(-2, 2, size=(4, 5)).astype(np.float32)
        w = Tensor(rng.standard_normal((5, 5)).astype(np.float32))
        gain = Tensor(np.ones(5, dtype=np.float32))
        bias = Tensor(np.zeros(5, dtype=np.float32))
        proj = Tensor(rng.standard_normal((4, 5)).astype(np.float32))

        def build(x):
            h = T.relu(T.matmul(x, w))
            h = T.layer_norm(h, gain, bias)
            s = T.softmax(T.matmul(h, w))
            return T.sum_all(T.mul(s, proj))

        g, fd = _grad_of(build, x0)
        assert relative_error(g, fd) < 1e-3, f"seed {seed}"


# ---------------------------------------------------------------------------
# shape ops


def test_transpose_and_reshape_roundtrip_grad():
    rng = np.random.default_rng(23)
    x0 = rng.uniform(-1, 1, size=(2, 3, 4)).astype(np.float32)
    proj = Tensor(rng.standard_normal((3, 8)).astype(np.float32))

    def build(x):
        y = T.transpose(x, (1, 0, 2))
        y = T.reshape(y, (3, 8))
        return T.sum_all(T.mul(y, proj))

    g, fd = _grad_of(build, x0)
    assert relative_error(g, fd) < 1e-3


def test_concat_and_broadcast_rows_grad():
    rng = np.random.default_rng(29)
    a0 = rng.uniform(-1, 1, size=(3, 2)).astype(np.float32)
    b = Tensor(rng.uniform(-1, 1, size=4).astype(np.float32), requires_grad=True)
    proj = Tensor(rng.standard_normal((3, 6)).astype(np.float32))
    a = Tensor(a0, requires_grad=True)
    with Tape() as tape:
        joined = T.concat(a, T.broadcast_rows(b, 3), axis=-1)
        loss = T.sum_all(T.mul(joined, proj))
    backward(loss, tape)
    np.testing.assert_allclose(a.grad, proj.data[:, :2], rtol=1e-6)
    np.testing.assert_allclose(b.grad, proj.data[:, 2:].sum(axis=0), rtol=1e-6)


def test_embedding_scatter_grad():
    table = Tensor(np.random.default_rng(1).standard_normal((6, 3)).astype(np.float32), requires_grad=True)
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    with Tape() as tape:
        loss = T.sum_all(T.embedding(table, ids))
    backward(loss, tape)
    expect = np.zeros((6, 3), dtype=np.float32)
    for i in ids.reshape(-1):
        expect[i] += 1.0
    np.testing.assert_array_equal(table.grad, expect)


def test_slice_rows_grad():
    x = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.slice_rows(x, 1, 3))
    backward(loss, tape)
    expect = np.zeros((4, 3), dtype=np.float32)
    expect[1:3] = 1.0
    np.testing.assert_array_equal(x.grad, expect)
