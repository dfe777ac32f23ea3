import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rsnmt.errors import NumericalError, OutOfVocabularyError, ParameterError, ShapeError
from rsnmt.tensor import (
    Rng,
    Tensor,
    backward,
    check_gradients,
    concat,
    cross_entropy_label_smoothed,
    dropout,
    embedding,
    layer_norm,
    matmul,
    no_grad,
    relu,
    reshape,
    softmax,
    sum_all,
    topological_order,
    transpose,
)


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def finite_diff(f, x, h=1e-6):
    """Central differences of scalar f(np.ndarray) -> float, coordinate by coordinate."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (2 * h)
    return out


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = t64(np.eye(2))
    b = t64([[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_row_times_column():
    assert matmul(t64([[1, 2]]), t64([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    B = rng.standard_normal((4, 3))
    err = check_gradients(lambda a: sum_all(matmul(a, t64(B))), rng.standard_normal((2, 4)))
    assert err < 1e-6


def test_batched_matmul_gradients():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((2, 3, 4, 5))
    B = rng.standard_normal((2, 3, 5, 2))
    W = rng.standard_normal((5, 6))
    assert check_gradients(lambda a: sum_all(matmul(a, t64(B)) * t64(np.arange(8.0).reshape(4, 2))), A) < 1e-6
    assert check_gradients(lambda b: sum_all(relu(matmul(t64(A), b))), B) < 1e-6
    assert check_gradients(lambda w: sum_all(matmul(t64(A), w) * matmul(t64(A), w)), W) < 1e-6


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(t64([0, 0, 0, 0]), 0).data, [0.25] * 4)


def test_softmax_no_overflow():
    out = softmax(t64([1000.0, 0.0]), 0).data
    assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_direct_evaluation():
    z = sum(math.exp(v) for v in (1, 2, 3))
    expected = [math.exp(v) / z for v in (1, 2, 3)]
    out = softmax(t64([1, 2, 3]), 0).data
    np.testing.assert_allclose(out, expected, rtol=1e-12)
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=5e-6)


def test_softmax_nan_raises():
    with pytest.raises(NumericalError):
        softmax(t64([1.0, np.nan]), 0)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        softmax(t64(np.ones((2, 2))), 2)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)),
    st.integers(0, 2),
)
def test_softmax_rows_sum_to_one(x, axis):
    out = softmax(Tensor(x), axis).data
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)
    assert (out >= 0).all() and (out <= 1).all()


def test_softmax_gradient_any_axis():
    rng = np.random.default_rng(2)
    w = t64(rng.standard_normal((3, 4, 5)))
    for axis in (0, 1, 2):
        assert check_gradients(lambda x: sum_all(softmax(x, axis) * w), rng.standard_normal((3, 4, 5))) < 1e-6


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_vector_is_zero():
    out = layer_norm(t64([5.0, 5.0, 5.0]), t64(np.ones(3)), t64(np.zeros(3)), 1e-6).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_layer_norm_two_values():
    # mean 2, population std 1
    out = layer_norm(t64([1.0, 3.0]), t64(np.ones(2)), t64(np.zeros(2)), 1e-12).data
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-9)


def test_layer_norm_gradients():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 5))
    g = rng.standard_normal(5)
    b = rng.standard_normal(5)
    w = t64(rng.standard_normal((3, 5)))
    assert check_gradients(lambda x_: sum_all(layer_norm(x_, t64(g), t64(b)) * w), x) < 1e-5
    assert check_gradients(lambda g_: sum_all(layer_norm(t64(x), g_, t64(b)) * w), g) < 1e-5
    assert check_gradients(lambda b_: sum_all(layer_norm(t64(x), t64(g), b_) * w), b) < 1e-5


def test_layer_norm_rejects_bad_eps_and_shapes():
    with pytest.raises(ParameterError):
        layer_norm(t64([1.0, 2.0]), t64([1.0, 1.0]), t64([0.0, 0.0]), 0.0)
    with pytest.raises(ShapeError):
        layer_norm(t64([1.0, 2.0]), t64([1.0]), t64([0.0, 0.0]))


# ---------------------------------------------------------------- dropout


def test_dropout_identity_cases():
    x = t64(np.arange(10.0))
    assert dropout(x, 0.0, True, Rng(0)) is x
    assert dropout(x, 0.7, False, Rng(0)) is x


def test_dropout_rejects_p_one():
    with pytest.raises(ParameterError):
        dropout(t64([1.0]), 1.0, True, Rng(0))


def test_dropout_mean_preserved():
    out = dropout(Tensor(np.ones(10**6, dtype=np.float32)), 0.5, True, Rng(123)).data
    assert 0.99 <= out.mean() <= 1.01
    assert set(np.unique(out).tolist()) == {0.0, 2.0}


def test_dropout_gradient_with_frozen_mask():
    w = t64(np.random.default_rng(4).standard_normal(12))

    def f(x):
        return sum_all(dropout(x, 0.3, True, Rng(9)) * x * w)

    assert check_gradients(f, np.linspace(-1, 1, 12)) < 1e-6


def test_dropout_deterministic_per_seed():
    x = Tensor(np.ones(100, dtype=np.float32))
    a = dropout(x, 0.5, True, Rng(5, 1)).data
    b = dropout(x, 0.5, True, Rng(5, 1)).data
    c = dropout(x, 0.5, True, Rng(5, 2)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# ---------------------------------------------------------------- relu / embedding / structure


def test_relu_values():
    np.testing.assert_array_equal(relu(t64([-1.0, 2.0])).data, [0.0, 2.0])


def test_embedding_returns_rows_exactly():
    table = t64(np.arange(12.0).reshape(4, 3))
    np.testing.assert_array_equal(embedding(table, [2]).data, [[6.0, 7.0, 8.0]])


def test_embedding_out_of_vocabulary():
    with pytest.raises(OutOfVocabularyError):
        embedding(t64(np.zeros((4, 3))), [4])


def test_embedding_repeated_id_accumulates():
    rng = np.random.default_rng(5)
    table = rng.standard_normal((5, 3))
    w = rng.standard_normal((2, 3))
    ids = [3, 3]

    def f_np(t):
        return float((t[ids] * w).sum())

    tt = t64(table, grad=True)
    sum_all(embedding(tt, ids) * t64(w)).backward()
    np.testing.assert_allclose(tt.grad, finite_diff(f_np, table), atol=1e-8)
    np.testing.assert_allclose(tt.grad[3], w[0] + w[1], atol=1e-12)
    assert not tt.grad[[0, 1, 2, 4]].any()


def test_structural_ops_gradients():
    rng = np.random.default_rng(6)
    w = t64(rng.standard_normal((3, 8)))
    other = t64(rng.standard_normal((2, 4)))

    def f(x):
        y = reshape(transpose(x, (1, 0)), (2, 4))  # x: [4, 2]
        z = concat([y, other * y], axis=0)  # [4, 4]
        return sum_all(reshape(z, (2, 8)) * reshape(concat([w, w], axis=0)[:2], (2, 8)) if False else reshape(z, (2, 8)))

    assert check_gradients(f, rng.standard_normal((4, 2))) < 1e-9

    def g(x):
        z = concat([x, x * x], axis=1)  # [3, 8]
        return sum_all(z * w)

    assert check_gradients(g, rng.standard_normal((3, 4))) < 1e-7


def test_broadcast_add_gradient():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 4))
    bias = rng.standard_normal(4)
    w = t64(rng.standard_normal((3, 4)))
    assert check_gradients(lambda b: sum_all((t64(x) + b) * w), bias) < 1e-9
    assert check_gradients(lambda b: sum_all((t64(x) - b) * w), bias.reshape(1, 4)) < 1e-9


# ---------------------------------------------------------------- cross entropy


def test_ce_epsilon_zero_is_nll():
    logits = np.array([[0.1, 0.7, -0.3], [1.0, -1.0, 0.0]])
    gold = [1, 2]
    loss = cross_entropy_label_smoothed(t64(logits), gold, 0.0, pad_id=-1).item()
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    assert loss == pytest.approx(-(lp[0, 1] + lp[1, 2]) / 2, rel=1e-12)


def test_ce_uniform_logits_is_log_v():
    assert cross_entropy_label_smoothed(t64(np.zeros((3, 7))), [1, 2, 3], 0.0, -1).item() == pytest.approx(
        math.log(7), rel=1e-12
    )


def test_ce_hand_evaluated_smoothing():
    # p = [1/4, 1/4, 1/2]; q = [0.05, 0.05, 0.9]
    expected = -(0.05 * math.log(0.25) * 2 + 0.9 * math.log(0.5))
    got = cross_entropy_label_smoothed(t64([[0.0, 0.0, math.log(2)]]), [2], 0.1, -1).item()
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(1.1 * math.log(2), rel=1e-12)


def test_ce_excludes_pad_positions():
    logits = np.random.default_rng(8).standard_normal((4, 5))
    full = cross_entropy_label_smoothed(t64(logits[[0, 2]]), [3, 4], 0.1, 0).item()
    masked = cross_entropy_label_smoothed(t64(logits), [3, 0, 4, 0], 0.1, 0).item()
    assert masked == pytest.approx(full, rel=1e-12)


def test_ce_all_pad_is_an_error():
    with pytest.raises(ParameterError):
        cross_entropy_label_smoothed(t64(np.zeros((2, 3))), [0, 0], 0.1, 0)


def test_ce_gradient():
    rng = np.random.default_rng(9)
    gold = [1, 0, 4, 2]
    err = check_gradients(lambda x: cross_entropy_label_smoothed(x, gold, 0.1, 0), rng.standard_normal((4, 5)))
    assert err < 1e-6


def test_softmax_ce_composite_gradient():
    rng = np.random.default_rng(10)
    w = rng.standard_normal((6, 5))

    def f(x):
        h = softmax(matmul(x, t64(w)), -1)
        return cross_entropy_label_smoothed(matmul(h, t64(w.T)), [1, 2, 3], 0.1, 0)

    assert check_gradients(f, rng.standard_normal((3, 6))) < 1e-6


# ---------------------------------------------------------------- backward


def test_backward_of_sum_is_ones():
    x = t64(np.arange(6.0).reshape(2, 3), grad=True)
    sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_fan_out_accumulates():
    x = t64([1.0, 2.0, 3.0], grad=True)
    sum_all(x + x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_backward_twice_accumulates():
    x = t64([1.0, 2.0], grad=True)
    sum_all(x).backward()
    sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_needs_scalar():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ShapeError):
        backward(x * x)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_k_uses_sum_single_use_gradients(k, seed):
    rng = np.random.default_rng(seed)
    w0 = rng.standard_normal((3, 3))
    x0 = rng.standard_normal((2, 3))

    def chain(ws):
        h = t64(x0)
        for w in ws:
            h = relu(matmul(h, w)) + h
        return sum_all(h * h)

    shared = t64(w0, grad=True)
    chain([shared] * k).backward()

    copies = [t64(w0, grad=True) for _ in range(k)]
    chain(copies).backward()
    summed = sum(c.grad for c in copies)
    np.testing.assert_allclose(shared.grad, summed, rtol=1e-6, atol=1e-9)


def test_topological_order_parents_after_children():
    a = t64([1.0], grad=True)
    b = a * a
    c = b + a
    d = c * b
    order = topological_order(d)
    pos = {id(t): i for i, t in enumerate(order)}
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] > pos[id(node)]


def test_no_grad_builds_no_graph():
    x = t64([1.0], grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad and y.is_leaf


def test_check_gradients_quadratic_is_exact():
    x = np.random.default_rng(11).standard_normal(7)
    assert check_gradients(lambda t: sum_all(t * t), x) < 1e-9


def test_forward_is_deterministic():
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    w = Tensor(rng.standard_normal((8, 8)).astype(np.float32))

    def run():
        return dropout(softmax(matmul(x, w), -1), 0.2, True, Rng(3)).data

    assert run().tobytes() == run().tobytes()
