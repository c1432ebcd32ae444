import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from l2c import autodiff as ad
from l2c.autodiff import AdamWState, ShapeError, Tape, adamw_step, backward


def _weights(shape, seed=99):
    return np.random.default_rng(seed).normal(size=shape)


def gradcheck(fn, inputs, h=1e-3, seed=0):
    """Analytic gradients in float32 against central differences in float64.

    ``fn`` maps tensors to one tensor; the scalar probed is sum(out * R).
    Returns the worst relative error over all inputs.
    """
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    out = fn(*leaves)
    R = _weights(out.shape, seed).astype(np.float32)
    loss = ad.sum_(ad.mul(out, R))
    grads = backward(tape, loss)

    def f64(arrs):
        ts = [ad.Tensor(a, dtype=np.float64) for a in arrs]
        return float((fn(*ts).data * R.astype(np.float64)).sum())

    worst = 0.0
    base = [np.asarray(x, dtype=np.float64) for x in inputs]
    for i, leaf in enumerate(leaves):
        num = np.zeros_like(base[i])
        for idx in np.ndindex(base[i].shape):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[i][idx] += h
            minus[i][idx] -= h
            num[idx] = (f64(plus) - f64(minus)) / (2 * h)
        g = grads[leaf.node].astype(np.float64)
        err = np.linalg.norm(g - num) / max(np.linalg.norm(num), np.linalg.norm(g), 1e-8)
        worst = max(worst, err)
    return worst


rng = np.random.default_rng(0)
A23 = rng.normal(size=(2, 3)).astype(np.float32)
B34 = rng.normal(size=(3, 4)).astype(np.float32)
C23 = rng.normal(size=(2, 3)).astype(np.float32)
V3 = rng.normal(size=(3,)).astype(np.float32)
T234 = rng.normal(size=(2, 3, 4)).astype(np.float32)

PRIMITIVES = {
    "matmul": (lambda a, b: ad.matmul(a, b), [A23, B34]),
    "matmul_batched": (lambda a, b: a @ b, [T234, rng.normal(size=(2, 4, 2)).astype(np.float32)]),
    "add_broadcast": (lambda a, b: ad.add(a, b), [A23, V3]),
    "mul_broadcast": (lambda a, b: ad.mul(a, b), [A23, V3]),
    "scale": (lambda a: ad.scale(a, -1.7), [A23]),
    "softmax": (lambda a: ad.softmax(a), [T234]),
    "layernorm": (lambda a: ad.layernorm(a), [T234]),
    "gelu": (lambda a: ad.gelu(a), [A23]),
    "sigmoid": (lambda a: ad.sigmoid(a), [A23]),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), [A23, C23]),
    "slice": (lambda a: a[:, 1:3], [T234]),
    "mean": (lambda a: ad.mean(a, axis=1), [T234]),
    "sum": (lambda a: ad.sum_(a, axis=(0, 2)), [T234]),
    "mse": (lambda a, b: ad.mse(a, b), [A23, C23]),
    "reshape": (lambda a: ad.reshape(a, (6, 4)), [T234]),
    "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), [T234]),
    "take_rows": (lambda a: ad.take_rows(a, np.array([1, 0, 1, 2])),
                  [rng.normal(size=(3, 2)).astype(np.float32)]),
}


@pytest.mark.parametrize("kind", sorted(PRIMITIVES))
def test_gradcheck_every_primitive(kind):
    fn, inputs = PRIMITIVES[kind]
    assert gradcheck(fn, inputs) < 1e-3


def test_matmul_identity():
    A = np.random.default_rng(1).normal(size=(3, 3)).astype(np.float32)
    np.testing.assert_array_equal(ad.matmul(np.eye(3, dtype=np.float32), A).data, A)


def test_sigmoid_zero_and_derivative():
    assert ad.sigmoid(np.float32(0.0)).item() == 0.5
    tape = Tape()
    w = tape.leaf(0.0)
    loss = ad.sigmoid(w)
    assert backward(tape, loss)[w.node] == pytest.approx(0.25)


def test_sigmoid_is_stable_at_extremes():
    out = ad.sigmoid(np.array([-1000.0, 1000.0], dtype=np.float32)).data
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 and out[1] == 1.0


def test_softmax_matches_scalar_oracle():
    out = ad.softmax(np.array([1.0, 2.0, 3.0], dtype=np.float32)).data
    exps = [math.exp(v) for v in (1.0, 2.0, 3.0)]
    oracle = [e / sum(exps) for e in exps]
    np.testing.assert_allclose(out, oracle, atol=1e-6)
    assert abs(out.sum() - 1.0) < 1e-6


def test_gelu_is_erf_based():
    x = np.array([-2.0, -0.5, 0.0, 0.7, 3.0])
    oracle = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(ad.gelu(x.astype(np.float32)).data, oracle, atol=1e-6)


def test_layernorm_matches_definition():
    x = np.random.default_rng(2).normal(size=(4, 5))
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    np.testing.assert_allclose(ad.layernorm(ad.Tensor(x, dtype=np.float64)).data,
                               (x - mu) / np.sqrt(var + 1e-6), atol=1e-12)


def test_sum_gradient_is_all_ones():
    tape = Tape()
    x = tape.leaf(np.zeros((2, 3, 4)))
    g = backward(tape, ad.sum_(x))[x.node]
    np.testing.assert_array_equal(g, np.ones((2, 3, 4)))


def test_two_layer_net_mse_gradient():
    r = np.random.default_rng(3)
    X = r.normal(size=(5, 3)).astype(np.float32)
    Y = r.normal(size=(5, 2)).astype(np.float32)
    W1 = r.normal(size=(3, 4)).astype(np.float32)
    W2 = r.normal(size=(4, 2)).astype(np.float32)

    def net(w1, w2):
        return ad.mse(ad.gelu(ad.Tensor(X, dtype=w1.dtype) @ w1) @ w2,
                      ad.Tensor(Y, dtype=w1.dtype))

    tape = Tape()
    l1, l2 = tape.leaf(W1), tape.leaf(W2)
    g = backward(tape, net(l1, l2))

    def f64(w1, w2):
        return net(ad.Tensor(w1, dtype=np.float64), ad.Tensor(w2, dtype=np.float64)).item()

    for leaf, idx in ((l1, 0), (l2, 1)):
        base = [W1.astype(np.float64), W2.astype(np.float64)]
        num = np.zeros_like(base[idx])
        for i in np.ndindex(num.shape):
            p = [b.copy() for b in base]
            m = [b.copy() for b in base]
            p[idx][i] += 1e-3
            m[idx][i] -= 1e-3
            num[i] = (f64(*p) - f64(*m)) / 2e-3
        ana = g[leaf.node]
        assert np.linalg.norm(ana - num) / np.linalg.norm(num) < 1e-3


def test_shape_errors_name_kind_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(A23, C23)
    with pytest.raises(ShapeError, match="add"):
        ad.add(A23, np.zeros((4,), np.float32))
    with pytest.raises(ShapeError, match="mse"):
        ad.mse(A23, B34)


def test_backward_rejects_non_scalar_and_foreign_loss():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, ad.scale(x, 2.0))
    other = Tape()
    y = other.leaf(1.0)
    with pytest.raises(ValueError):
        backward(tape, ad.scale(y, 2.0))


def test_unreachable_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    unused = tape.leaf(np.ones((2, 2)))
    g = backward(tape, ad.sum_(x))
    np.testing.assert_array_equal(g[unused.node], np.zeros((2, 2)))


def test_unlinked_tensors_get_no_gradient():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    const = ad.Tensor(np.full(3, 2.0, np.float32))
    g = backward(tape, ad.sum_(ad.mul(x, const)))
    assert set(g) == {x.node}
    np.testing.assert_array_equal(g[x.node], np.full(3, 2.0))


def test_topological_order_of_nodes():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = ad.gelu(ad.add(ad.matmul(x, x), x))
    ad.sum_(ad.softmax(y))
    for i, node in enumerate(tape.nodes):
        assert all(p < i for p in node.parents)


def test_mixing_tapes_is_rejected():
    a, b = Tape().leaf(1.0), Tape().leaf(2.0)
    with pytest.raises(ValueError, match="different tapes"):
        ad.add(a, b)


def test_separate_tapes_do_not_share_gradients():
    t1, t2 = Tape(), Tape()
    x1, x2 = t1.leaf(np.ones(2)), t2.leaf(np.ones(2))
    l1 = ad.sum_(ad.scale(x1, 3.0))
    l2 = ad.sum_(ad.scale(x2, 5.0))
    g2 = backward(t2, l2)
    g1 = backward(t1, l1)
    np.testing.assert_array_equal(g1[x1.node], [3.0, 3.0])
    np.testing.assert_array_equal(g2[x2.node], [5.0, 5.0])


def test_forward_is_deterministic():
    x = np.random.default_rng(4).normal(size=(3, 4, 8)).astype(np.float32)
    a = ad.softmax(ad.layernorm(x) @ np.ones((8, 8), np.float32)).data
    b = ad.softmax(ad.layernorm(x) @ np.ones((8, 8), np.float32)).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- AdamW

def test_adamw_zero_grad_no_decay_is_identity():
    p = [np.array([1.5, -2.0], np.float32)]
    new, _ = adamw_step(p, [np.zeros(2, np.float32)], AdamWState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(new[0], p[0])


def test_adamw_scalar_oracle():
    p0, g, lr, wd, b1, b2, eps = 0.7, -0.3, 0.01, 0.05, 0.9, 0.999, 1e-8
    new, st_ = adamw_step([np.array(p0)], [np.array(g)], AdamWState(), lr=lr, weight_decay=wd,
                          betas=(b1, b2), eps=eps)
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat, vhat = m / (1 - b1), v / (1 - b2)
    oracle = p0 - lr * wd * p0 - lr * mhat / (math.sqrt(vhat) + eps)
    assert float(new[0]) == pytest.approx(oracle, abs=1e-12)
    assert st_.step == 1


def test_adamw_decay_shrinks_magnitude():
    p = [np.array([2.0, -3.0], np.float32)]
    new, _ = adamw_step(p, [np.zeros(2, np.float32)], AdamWState(), lr=0.1, weight_decay=0.1)
    assert np.all(np.abs(new[0]) < np.abs(p[0]))


def test_adamw_rejects_non_positive_lr():
    with pytest.raises(ValueError):
        adamw_step([np.zeros(1)], [np.zeros(1)], AdamWState(), lr=0.0)


def test_adamw_keeps_dtype_and_inputs():
    p = np.ones(3, np.float32)
    before = p.copy()
    new, _ = adamw_step([p], [np.ones(3, np.float32)], AdamWState(), lr=0.1)
    assert new[0].dtype == np.float32
    np.testing.assert_array_equal(p, before)


# ---------------------------------------------------------------- properties

small = arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4)),
               elements=st.floats(-3, 3, width=32))


@settings(max_examples=40, deadline=None)
@given(small)
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(x).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-5)
    assert np.all(out >= 0)


@settings(max_examples=40, deadline=None)
@given(small)
def test_broadcast_add_gradient_counts_rows(x):
    tape = Tape()
    a = tape.leaf(x)
    b = tape.leaf(np.zeros(x.shape[1], np.float32))
    g = backward(tape, ad.sum_(ad.add(a, b)))
    np.testing.assert_array_equal(g[b.node], np.full(x.shape[1], x.shape[0]))
    np.testing.assert_array_equal(g[a.node], np.ones_like(x))


@settings(max_examples=30, deadline=None)
@given(small)
def test_sigmoid_gradient_identity(x):
    tape = Tape()
    a = tape.leaf(x)
    s = ad.sigmoid(a)
    g = backward(tape, ad.sum_(s))[a.node]
    np.testing.assert_allclose(g, s.data * (1 - s.data), atol=1e-6)
