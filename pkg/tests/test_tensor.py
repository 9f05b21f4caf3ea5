import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffslt import tensor as T
from diffslt.tensor import ShapeError, Tensor
from helpers import GRAD_TOL, gradcheck, param_gradcheck

N_INSTANCES = 10


def _shape(rng, ndim=2, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


# op name -> builder(rng) returning (fn, inputs)
def _binary(op, positive_b=False):
    def build(rng):
        shape = _shape(rng)
        b_shape = shape if rng.random() < 0.5 else (1, shape[1])  # exercise broadcasting
        b = _pos(rng, b_shape) if positive_b else rng.standard_normal(b_shape)
        return op, [rng.standard_normal(shape), b]

    return build


def _unary(op, positive=False, away_from_zero=False):
    def build(rng):
        shape = _shape(rng, 3)
        x = _pos(rng, shape) if positive else rng.standard_normal(shape)
        if away_from_zero:
            x = np.where(np.abs(x) < 0.1, 0.5, x)
        return op, [x]

    return build


def _matmul(rng):
    m, k, n = _shape(rng, 3)
    return T.matmul, [rng.standard_normal((m, k)), rng.standard_normal((k, n))]


def _batched_matmul(rng):
    b, m, k, n = _shape(rng, 4)
    return T.matmul, [rng.standard_normal((b, m, k)), rng.standard_normal((k, n))]


def _linear(rng):
    b, d_in, d_out = _shape(rng, 3)
    return T.linear, [rng.standard_normal((b, 2, d_in)), rng.standard_normal((d_in, d_out)),
                      rng.standard_normal(d_out)]


def _layer_norm(rng):
    d = int(rng.integers(2, 6))
    return (lambda x, g, b: T.layer_norm(x, g, b, 1e-5)), [
        rng.standard_normal((3, d)), rng.standard_normal(d), rng.standard_normal(d)]


def _softmax(rng):
    return (lambda x: T.softmax(x, axis=-1)), [rng.standard_normal(_shape(rng, 2, 2, 5))]


def _attention(rng):
    heads = int(rng.choice([1, 2]))
    d = 2 * int(rng.integers(1, 3))
    lq, lk = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    mask = np.ones((2, lk), dtype=bool)
    mask[1, lk - 1] = lk == 1  # pad the last key of row 1 when there are several
    causal = bool(rng.random() < 0.5) and lq == lk

    def fn(q, k, v):
        return T.attention(q, k, v, n_heads=heads, key_mask=mask, causal=causal)

    return fn, [rng.standard_normal((2, lq, d)), rng.standard_normal((2, lk, d)), rng.standard_normal((2, lk, d))]


def _cross_entropy(rng):
    b, l, v = _shape(rng, 3, 2, 4)
    targets = rng.integers(0, v, size=(b, l))
    targets[0, 0] = 0
    targets[-1, -1] = 1
    return (lambda x: T.cross_entropy(x, targets, pad_id=0)), [rng.standard_normal((b, l, v))]


def _embedding(rng):
    ids = rng.integers(0, 5, size=(2, 3))
    return (lambda table: T.embedding(table, ids)), [rng.standard_normal((5, 3))]


def _getitem(rng):
    return (lambda x: x[:, 1:] * x[:, :1]), [rng.standard_normal((3, 4))]


def _concat(rng):
    return (lambda a, b: T.concat([a, b], axis=1)), [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))]


def _reductions(rng):
    return (lambda x: T.tsum(x, axis=1, keepdims=True) * T.mean(x, axis=0)), [rng.standard_normal((3, 4))]


def _shape_ops(rng):
    return (lambda x: T.transpose(T.reshape(x, (4, 3)), (1, 0))), [rng.standard_normal((2, 6))]


def _l1(rng):
    target = rng.standard_normal((3, 4))
    x = target + np.where(rng.random((3, 4)) < 0.5, 0.5, -0.5) + 0.1 * rng.standard_normal((3, 4))
    return (lambda p: T.l1_loss(p, target)), [x]


OPS = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "abs": _unary(T.tabs, away_from_zero=True),
    "tanh": _unary(T.tanh),
    "sqrt": _unary(T.sqrt, positive=True),
    "gelu": _unary(T.gelu),
    "matmul": _matmul,
    "batched_matmul": _batched_matmul,
    "linear": _linear,
    "layer_norm": _layer_norm,
    "softmax": _softmax,
    "attention": _attention,
    "cross_entropy": _cross_entropy,
    "embedding": _embedding,
    "getitem": _getitem,
    "concat": _concat,
    "sum_mean": _reductions,
    "reshape_transpose": _shape_ops,
    "l1_loss": _l1,
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(N_INSTANCES):
        fn, inputs = OPS[name](rng)
        assert gradcheck(fn, inputs, rng) <= GRAD_TOL


def test_transformer_block_gradients():
    from diffslt.nn import TransformerBlock

    rng = np.random.default_rng(3)
    block = TransformerBlock(4, 2, rng, ffn_mult=2, cross=True).astype(np.float64)
    ctx = Tensor(rng.standard_normal((2, 3, 4)))
    mask = np.array([[True, True, False], [True, True, True]])
    x = rng.standard_normal((2, 2, 4))

    def forward(xt):
        return block(xt, context=ctx, context_mask=mask)

    assert gradcheck(forward, [x], rng) <= GRAD_TOL
    assert param_gradcheck(lambda: forward(Tensor(x)), block.parameters(), rng) <= GRAD_TOL


# -- hand examples -----------------------------------------------------------------
def test_matmul_examples():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(T.matmul(eye, eye).data, np.eye(2))
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])
    z = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).standard_normal((3, 4))))
    np.testing.assert_array_equal(z.data, np.zeros((2, 4)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError, match="mismatch"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(T.layer_norm(Tensor([5.0, 5.0]), one, zero).data, [0.0, 0.0])
    out = T.layer_norm(Tensor([1.0, 3.0]), one, zero, eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-9)
    b = Tensor([0.25, -3.0])
    out = T.layer_norm(Tensor(np.random.default_rng(1).standard_normal((4, 2))), zero, b)
    np.testing.assert_array_equal(out.data, np.broadcast_to(b.data, (4, 2)))


def test_layer_norm_errors():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_layer_norm_standardises(x):
    if np.any(x.std(axis=-1) < 1e-2):
        return
    out = T.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(-300, 300)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_gelu_examples():
    assert T.gelu(Tensor(0.0)).data == 0.0
    assert abs(T.gelu(Tensor(10.0)).data - 10.0) < 1e-6
    assert abs(T.gelu(Tensor(-10.0)).data) < 1e-6


def test_attention_examples():
    rng = np.random.default_rng(0)
    q, v = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    out = T.attention(Tensor(q), Tensor(rng.standard_normal((1, 4))), Tensor(v)).data
    np.testing.assert_allclose(out, np.repeat(v, 3, axis=0), atol=1e-12)

    k = np.repeat(rng.standard_normal((1, 4)), 5, axis=0)
    v = rng.standard_normal((5, 4))
    out = T.attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, np.repeat(v.mean(axis=0, keepdims=True), 3, axis=0), atol=1e-12)

    q = np.array([[1.0, 0.0], [0.0, 2.0]])
    k = np.array([[0.5, -1.0], [1.5, 1.0]])
    v = np.array([[1.0, 2.0], [3.0, -1.0]])
    s = q @ k.T / np.sqrt(2.0)
    w = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(T.attention(Tensor(q), Tensor(k), Tensor(v)).data, w @ v, atol=1e-12)


def test_attention_masks():
    rng = np.random.default_rng(1)
    q, k, v = (rng.standard_normal((1, 3, 4)) for _ in range(3))
    mask = np.array([[True, True, False]])
    masked = T.attention(Tensor(q), Tensor(k), Tensor(v), key_mask=mask).data
    trimmed = T.attention(Tensor(q), Tensor(k[:, :2]), Tensor(v[:, :2])).data
    np.testing.assert_allclose(masked, trimmed, atol=1e-12)
    causal = T.attention(Tensor(q), Tensor(k), Tensor(v), causal=True).data
    np.testing.assert_allclose(causal[0, 0], v[0, 0], atol=1e-12)
    with pytest.raises(ShapeError, match="divisible"):
        T.attention(Tensor(q), Tensor(k), Tensor(v), n_heads=3)


def test_cross_entropy_examples():
    logits = np.full((1, 2, 4), -1e3)
    logits[0, 0, 2] = logits[0, 1, 3] = 1e3
    assert T.cross_entropy(Tensor(logits), np.array([[2, 3]])).data < 1e-12
    uniform = T.cross_entropy(Tensor(np.zeros((2, 3, 4))), np.array([[1, 2, 3], [3, 0, 0]]), pad_id=0)
    assert abs(float(uniform.data) - np.log(4)) < 1e-12
    with pytest.raises(ValueError, match="no supervised positions"):
        T.cross_entropy(Tensor(np.zeros((1, 2, 4))), np.array([[0, 0]]), pad_id=0)
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 2, 4))), np.array([[1, 9]]))


def test_embedding_bad_id():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.zeros((3, 2))), np.array([0, 3]))


def test_backward_examples():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))
    y = Tensor(3.0, requires_grad=True)
    (y * y).backward()
    assert y.grad == 6.0


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_unreached_params_get_zero_grads():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
    T.backward(a.sum(), [a, b])
    np.testing.assert_array_equal(b.grad, np.zeros(3))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert T.is_grad_enabled()


def test_shared_subexpression_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y * x).backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad == pytest.approx(16.0)


def test_replay_is_bitwise_deterministic():
    from diffslt.nn import TransformerBlock

    def run():
        rng = np.random.default_rng(7)
        block = TransformerBlock(8, 2, rng)
        x = Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
        out = block(x)
        (out * out).mean().backward()
        return out.data.tobytes(), [p.grad.tobytes() for p in block.parameters()]

    assert run() == run()
