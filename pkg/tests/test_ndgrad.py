import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import check_grad, central_diff, loop_layer_norm_row, loop_matmul, loop_softmax_row, rel_err
from plgt import ndgrad as nd
from plgt.exceptions import ConfigError, ContractError, DataError, DomainError, ShapeError
from plgt.ndgrad import Tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def T(x, grad=True):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=grad)


# -- matmul ----------------------------------------------------------------

def test_matmul_identity_and_small_case():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(nd.matmul(T(np.eye(3)), T(m)).data, m)
    out = nd.matmul(T([[1, 2], [3, 4]]), T([[0], [1]])).data
    assert out.tolist() == [[2], [4]]


def test_matmul_matches_triple_loop():
    rs = np.random.default_rng(0)
    a, b = rs.normal(size=(5, 4)), rs.normal(size=(4, 3))
    assert np.max(np.abs(nd.matmul(T(a), T(b)).data - np.array(loop_matmul(a, b)))) < 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nd.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        nd.matmul(T(np.ones((2, 2, 3))), T(np.ones((3, 3, 1))))


def test_matmul_gradients_with_broadcast_batch():
    rs = np.random.default_rng(1)
    a, b = T(rs.normal(size=(2, 3, 4, 5))), T(rs.normal(size=(3, 5, 2)))
    assert check_grad(nd.matmul, [a, b]) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_associative(m, k, n, p, seed):
    rs = np.random.default_rng(seed)
    a, b, c = (T(rs.normal(size=s)) for s in ((m, k), (k, n), (n, p)))
    left = nd.matmul(nd.matmul(a, b), c).data
    right = nd.matmul(a, nd.matmul(b, c)).data
    assert np.allclose(left, right, rtol=1e-9, atol=1e-12)


# -- elementwise -------------------------------------------------------------

def test_elem_pow_values_and_domain():
    assert nd.elem_pow(T(2.0), T(3.0)).item() == pytest.approx(8.0, rel=1e-14)
    assert np.allclose(nd.elem_pow(T([0.5, 3.0, 7.0]), T(np.zeros(3))).data, 1.0)
    with pytest.raises(DomainError):
        nd.elem_pow(T([1.0, 0.0]), T([1.0, 1.0]))
    with pytest.raises(DomainError):
        nd.elem_pow(T([-1.0]), T([2.0]))


def test_elem_pow_gradient_finite_difference():
    base, ex = T([2.0]), T([3.0])
    nd.backward(nd.tsum(nd.elem_pow(base, ex)))
    for t, analytic in ((base, 12.0), (ex, 8.0 * math.log(2.0))):
        num = central_diff(lambda: float(nd.elem_pow(base, ex).data[0]), t.data, (0,))
        assert rel_err(t.grad[0], num) < 1e-6
        assert t.grad[0] == pytest.approx(analytic, rel=1e-12)


def test_relu_family():
    assert nd.relu(T([-2.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert nd.leaky_relu(T([-1.0]), 0.2).item() == pytest.approx(-0.2)
    x = T([-3.0, 0.0, 4.0])
    nd.backward(nd.tsum(nd.leaky_relu(x, 0.2)))
    assert x.grad.tolist() == [0.2, 1.0, 1.0]
    y = T([0.0, -1.0])
    nd.backward(nd.tsum(nd.relu(y)))
    assert y.grad.tolist() == [1.0, 0.0]


def test_log_exp_and_domain():
    x = T([0.5, 2.0])
    assert np.allclose(nd.exp(nd.log(x)).data, x.data)
    with pytest.raises(DomainError):
        nd.log(T([0.0]))


@pytest.mark.parametrize("op", [nd.add, nd.sub, nd.mul, nd.div])
def test_broadcasting_binary_gradients(op):
    rs = np.random.default_rng(2)
    a, b = T(rs.normal(size=(3, 4))), T(rs.uniform(0.5, 2.0, size=(4,)))
    assert check_grad(op, [a, b]) < 1e-6


def test_binary_shape_error():
    with pytest.raises(ShapeError):
        nd.add(T(np.ones(3)), T(np.ones(4)))


# -- softmax / layer norm ------------------------------------------------------

def test_softmax_closed_forms():
    assert np.allclose(nd.softmax_lastdim(T([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    c, k = 1.7, 0.9
    out = nd.softmax_lastdim(T([c, c + k])).data
    sig = lambda z: 1 / (1 + math.exp(-z))  # noqa: E731
    assert out[0] == pytest.approx(sig(-k), abs=1e-15) and out[1] == pytest.approx(sig(k), abs=1e-15)


def test_softmax_oracle_and_jacobian():
    rs = np.random.default_rng(3)
    row = rs.normal(size=6)
    assert np.max(np.abs(nd.softmax_lastdim(T(row)).data - loop_softmax_row(row.tolist()))) < 1e-15
    assert check_grad(nd.softmax_lastdim, [T(row)], points=6) < 1e-5


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_rows_and_shift_invariance(x, c):
    a = nd.softmax_lastdim(T(x, False)).data
    b = nd.softmax_lastdim(T(x + c, False)).data
    assert np.all(np.abs(a.sum(axis=-1) - 1.0) < 1e-9)
    assert np.max(np.abs(a - b)) < 1e-12


def test_log_softmax_matches_log_of_softmax():
    rs = np.random.default_rng(4)
    x = rs.normal(size=(2, 7)) * 5
    assert np.allclose(nd.log_softmax_lastdim(T(x)).data, np.log(nd.softmax_lastdim(T(x)).data), atol=1e-12)
    assert check_grad(nd.log_softmax_lastdim, [T(x)]) < 1e-6


def test_layer_norm_examples():
    g, b = T(np.ones(4)), T(np.zeros(4))
    assert np.allclose(nd.layer_norm(T(np.full((1, 4), 3.0)), g, b).data, 0.0)
    out = nd.layer_norm(T([[1.0, -1.0]]), T(np.ones(2)), T(np.zeros(2)), eps=1e-14).data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_oracle_and_gradient():
    rs = np.random.default_rng(5)
    x, g, b = rs.normal(size=(3, 8)), rs.normal(size=8), rs.normal(size=8)
    out = nd.layer_norm(T(x), T(g), T(b), 1e-6).data
    oracle = [loop_layer_norm_row(r, g.tolist(), b.tolist(), 1e-6) for r in x.tolist()]
    assert np.max(np.abs(out - np.array(oracle))) < 1e-12
    assert check_grad(lambda x_, g_, b_: nd.layer_norm(x_, g_, b_, 1e-6), [T(x), T(g), T(b)]) < 1e-5


# -- reductions and shape ops ----------------------------------------------------

@pytest.mark.parametrize("fn", [
    lambda x: nd.tsum(x, axis=1),
    lambda x: nd.mean(x, axis=(0, 2), keepdims=True),
    lambda x: nd.transpose(x, (2, 0, 1)),
    lambda x: nd.reshape(x, (6, 4)),
    lambda x: nd.cumsum(x, axis=1),
    lambda x: nd.concat(nd.split(x, 2, axis=2)[::-1], axis=2),
    lambda x: nd.swap_last(x) * 2.0,
])
def test_shape_op_gradients(fn):
    x = T(np.random.default_rng(6).normal(size=(2, 3, 4)))
    assert check_grad(fn, [x]) < 1e-6


def test_split_concat_roundtrip():
    x = np.arange(12.0).reshape(3, 4)
    parts = nd.split(T(x), 2, axis=-1)
    assert [p.shape for p in parts] == [(3, 2), (3, 2)]
    assert np.array_equal(nd.concat(parts, axis=-1).data, x)


def test_embedding_scatter_add_and_range_error():
    table = T(np.random.default_rng(7).normal(size=(5, 3)))
    ids = np.array([[1, 1, 4]])
    nd.backward(nd.tsum(nd.embedding(table, ids)))
    expected = np.zeros((5, 3))
    expected[1] = 2.0
    expected[4] = 1.0
    assert np.array_equal(table.grad, expected)
    with pytest.raises(DataError, match="position"):
        nd.embedding(table, np.array([[0, 5]]))


def test_pick_gradient():
    x = T(np.random.default_rng(8).normal(size=(2, 3, 5)))
    idx = np.array([[0, 4, 2], [1, 1, 3]])
    assert check_grad(lambda t: nd.pick(t, idx), [x]) < 1e-6


# -- backward semantics ------------------------------------------------------------

def test_backward_simple_losses():
    x = T([1.0, -2.0, 3.0])
    nd.backward(nd.tsum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = T([1.0, -2.0, 3.0])
    nd.backward(nd.tsum(y * y) * 0.5)
    assert np.array_equal(y.grad, y.data)


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        nd.backward(T([1.0, 2.0]) * 2.0)


def test_repeated_backward_accumulates_and_linearity():
    rs = np.random.default_rng(9)
    x = T(rs.normal(size=4))
    f1 = lambda: nd.tsum(nd.exp(x))  # noqa: E731
    f2 = lambda: nd.tsum(x * x * x)  # noqa: E731
    nd.backward(f1())
    nd.backward(f2())
    separate = x.grad.copy()
    x.grad = None
    nd.backward(f1() + f2())
    assert np.max(np.abs(separate - x.grad)) < 1e-12


def test_composite_against_full_jacobian():
    rs = np.random.default_rng(10)
    a, b = T(rs.normal(size=(3, 4))), T(rs.normal(size=(4, 2)))

    def fn(a_, b_):
        return nd.softmax_lastdim(nd.leaky_relu(nd.matmul(a_, b_), 0.2)) * nd.exp(nd.matmul(a_, b_) * 0.1)

    nd.backward(nd.tsum(fn(a, b)))
    for t in (a, b):
        for idx in np.ndindex(t.shape):
            num = central_diff(lambda: float(fn(a, b).data.sum()), t.data, idx)
            assert rel_err(t.grad[idx], num) < 1e-4


def test_constants_never_receive_gradient():
    x, c = T([1.0, 2.0]), T([3.0, 4.0], grad=False)
    nd.backward(nd.tsum(x * c))
    assert c.grad is None and x.grad.tolist() == [3.0, 4.0]


def test_no_grad_records_nothing():
    x = T([1.0])
    with nd.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()
    assert nd.grad_enabled()


# -- dropout and RNG ------------------------------------------------------------------

def test_dropout_identity_cases_and_errors():
    x = T(np.ones(10))
    assert nd.dropout(x, 0.0, True, nd.Rng(0)) is x
    assert nd.dropout(x, 0.9, False) is x
    for bad in (-0.1, 1.0):
        with pytest.raises(ConfigError):
            nd.dropout(x, bad, True, nd.Rng(0))


def test_dropout_statistics():
    x = T(np.ones(100_000))
    out = nd.dropout(x, 0.5, True, nd.Rng(123, "probe")).data
    assert abs(np.mean(out != 0) - 0.5) < 0.01
    assert abs(out.mean() - 1.0) < 0.02


def test_seeded_streams_reproducible_and_independent():
    a = nd.Rng(5, "dropout", 3).random(8)
    b = nd.Rng(5, "dropout", 3).random(8)
    c = nd.Rng(5, "dropout", 4).random(8)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.array_equal(nd.Rng(5).child("x", 1).random(3), nd.Rng(5, "x", 1).random(3))
