import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unimm import numerics as nx
from unimm.numerics import NumericsError, Parameter, ShapeError, Tape


def _param(rng, *shape, name="p"):
    return Parameter(rng.standard_normal(shape), name=name)


def _check(f, params, tol=1e-6):
    err = nx.finite_diff_check(f, params, eps=1e-6)
    assert err < tol, err


def test_tanh_sum_gradient_matches_derivative():
    x = Parameter(np.array([0.3, -1.2, 2.0]), name="x")
    with Tape() as tape:
        loss = nx.tsum(nx.tanh(x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 1 - np.tanh(x.data) ** 2, rtol=1e-12)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcast_binary_ops(op):
    rng = np.random.default_rng(0)
    a = _param(rng, 3, 4, name="a")
    b = Parameter(rng.uniform(0.5, 2.0, (4,)), name="b")
    fn = getattr(nx, op)
    _check(lambda: nx.tsum(nx.mul(fn(a, b), fn(a, b))), [a, b])


def test_matmul_batched_and_2d():
    rng = np.random.default_rng(1)
    a, w, v = _param(rng, 2, 3, 4, name="a"), _param(rng, 4, 5, name="w"), _param(rng, 2, 5, 3, name="v")
    _check(lambda: nx.tsum(nx.tanh(nx.matmul(nx.matmul(a, w), v))), [a, w, v])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((4, 2)))


@pytest.mark.parametrize("fn", [nx.exp, nx.tanh, nx.silu, nx.gelu, lambda x: nx.log(nx.add(nx.mul(x, x), 1.0)),
                                lambda x: nx.sqrt(nx.add(nx.mul(x, x), 0.5))])
def test_unary_gradients(fn):
    rng = np.random.default_rng(2)
    x = _param(rng, 5, 3)
    _check(lambda: nx.tsum(fn(x)), [x])


def test_shape_ops_and_indexing():
    rng = np.random.default_rng(3)
    x, y = _param(rng, 2, 3, 4, name="x"), _param(rng, 2, 1, 4, name="y")

    def f():
        z = nx.concat([x, y], axis=1)                 # [2,4,4]
        z = nx.transpose(z, (0, 2, 1)).reshape(8, 4)
        r = nx.take_rows(z, np.array([0, 3, 3, 7]))
        s = nx.scatter_rows(z, np.array([1, 2]), nx.mul(r[:2], 2.0))
        return nx.add(nx.tsum(nx.mul(s, s)), nx.tsum(nx.mean(nx.getitem(z, (slice(1, 5), [0, 2])), axis=0)))
    _check(f, [x, y])


def test_embedding_accumulates_repeated_ids():
    table = Parameter(np.zeros((5, 2)), name="emb")
    with Tape() as tape:
        tape.backward(nx.tsum(nx.embedding(table, np.array([[1, 1, 3]]))))
    np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 1, 0])


def test_rms_norm_gradient_and_value():
    rng = np.random.default_rng(4)
    x, g = _param(rng, 3, 6, name="x"), _param(rng, 6, name="g")
    out = nx.rms_norm(x.data, g.data).data
    ref = x.data / np.sqrt(np.mean(x.data ** 2, axis=-1, keepdims=True) + 1e-6) * g.data
    np.testing.assert_allclose(out, ref, rtol=1e-12)
    _check(lambda: nx.tsum(nx.mul(nx.rms_norm(x, g), x)), [x, g])


def test_masked_softmax_rows_and_gradient():
    rng = np.random.default_rng(5)
    s = _param(rng, 2, 4, 4)
    mask = np.tril(np.ones((4, 4), dtype=bool))
    p = nx.masked_softmax(s.data, mask).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.all(p[..., ~mask] == 0)
    w = rng.standard_normal((2, 4, 4))
    _check(lambda: nx.tsum(nx.mul(nx.masked_softmax(s, mask), w)), [s])


def test_masked_softmax_fully_masked_row_raises():
    mask = np.ones((3, 3), dtype=bool)
    mask[1] = False
    with pytest.raises(NumericsError):
        nx.masked_softmax(np.zeros((3, 3)), mask)


def test_softmax_stable_for_large_logits():
    p = nx.softmax(np.array([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-15)


def test_cross_entropy_value_mask_and_gradient():
    rng = np.random.default_rng(6)
    logits = _param(rng, 2, 3, 7)
    targets = rng.integers(0, 7, (2, 3))
    mask = np.array([[1, 0, 1], [1, 1, 0]], dtype=bool)
    lp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
    ref = -np.take_along_axis(lp, targets[..., None], -1)[..., 0][mask].mean()
    assert float(nx.cross_entropy(logits.data, targets, mask).data) == pytest.approx(ref, rel=1e-12)
    _check(lambda: nx.cross_entropy(logits, targets, mask), [logits])


def test_cross_entropy_empty_mask_and_bad_target():
    assert float(nx.cross_entropy(np.zeros((1, 2, 3)), np.zeros((1, 2), int), np.zeros((1, 2), bool)).data) == 0.0
    with pytest.raises((ShapeError, ValueError)):
        nx.cross_entropy(np.zeros((1, 2, 3)), np.array([[0, 3]]))


def test_mse_value():
    a, b = np.arange(6.0).reshape(2, 3), np.ones((2, 3))
    assert float(nx.mse(a, b).data) == pytest.approx(np.mean((a - b) ** 2), rel=1e-15)


def test_params_accumulate_across_uses():
    x = Parameter(np.array([2.0]), name="x")
    with Tape() as tape:
        tape.backward(nx.tsum(nx.add(nx.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, [5.0])


def test_frozen_parameter_gets_no_gradient():
    x = Parameter(np.array([1.0, 2.0]), name="x")
    x.requires_grad = False
    y = Parameter(np.array([3.0, 4.0]), name="y")
    with Tape() as tape:
        tape.backward(nx.tsum(nx.mul(x, y)))
    np.testing.assert_array_equal(x.grad, 0.0)
    np.testing.assert_array_equal(y.grad, [1.0, 2.0])


def test_gradcheck_eps_bounds():
    x = Parameter(np.ones(2), name="x")
    for eps in (1e-9, 1e-2):
        with pytest.raises(ValueError):
            nx.finite_diff_check(lambda: nx.tsum(x), [x], eps=eps)


def test_gradcheck_detects_wrong_gradient():
    x = Parameter(np.array([0.5, -0.3]), name="x")

    def bad_tanh(t):
        # backward drops the 1 - tanh^2 factor
        return nx._make(np.tanh(t.data), (t,), lambda g: (g,))

    assert nx.finite_diff_check(lambda: nx.tsum(bad_tanh(x)), [x]) > 1e-2


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_matmul_chain_gradient_property(m, k, seed):
    rng = np.random.default_rng(seed)
    a, b = _param(rng, m, k, name="a"), _param(rng, k, 3, name="b")
    _check(lambda: nx.tsum(nx.tanh(nx.matmul(a, b))), [a, b], tol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_sums_to_one(xs):
    p = nx.softmax(np.array(xs)).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)
