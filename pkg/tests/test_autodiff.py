import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nerfloc import autodiff as ad
from nerfloc.autodiff import Parameter, Tape, Tensor, apply, backward, grad_check


def grads_of(fn, *params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(loss, tape, params)
    return [p.grad.copy() for p in params]


def numeric_grad(fn, p, step=1e-6):
    out = np.zeros_like(p.data)
    base = p.data.copy()
    for i in range(base.size):
        for sign in (1, -1):
            bumped = base.copy().ravel()
            bumped[i] += sign * step
            p.data = bumped.reshape(base.shape)
            out.ravel()[i] += sign * float(fn().data) / (2 * step)
    p.data = base
    return out


def test_matmul_identity():
    out = apply("matmul", [Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.eye(2))])
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_uniform():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_layer_norm_matches_scalar_formula():
    xs = [1.0, 2.0, 3.0]
    mu = sum(xs) / 3
    var = sum((x - mu) ** 2 for x in xs) / 3
    expected = [(x - mu) / var ** 0.5 for x in xs]
    out = ad.layer_norm(Tensor(xs), eps=0.0).data
    np.testing.assert_allclose(out, expected, atol=1e-15)
    assert abs(out.mean()) < 1e-12
    assert abs(out.var() - 1) < 1e-12


def test_backward_square():
    x = Parameter(np.array([1.0, -2.0, 3.0]), "x")
    (g,) = grads_of(lambda: (x * x).sum(), x)
    np.testing.assert_array_equal(g, [2, -4, 6])


def test_backward_sigmoid_at_zero():
    w = Parameter(np.array(0.0), "w")
    (g,) = grads_of(lambda: ad.sigmoid(w) * 1.0, w)
    assert g == 0.25


def test_mlp_cross_entropy_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(5, 4)))
    target = rng.integers(0, 3, size=5)
    ws = [Parameter(rng.normal(size=s) * 0.7, f"w{i}") for i, s in enumerate([(4, 6), (6, 6), (6, 3)])]
    bs = [Parameter(rng.normal(size=s[1]) * 0.1, f"b{i}") for i, s in enumerate([(4, 6), (6, 6), (6, 3)])]

    def loss():
        h = x
        for i in range(3):
            h = h @ ws[i] + bs[i]
            if i < 2:
                h = ad.gelu(h)
        logp = ad.log_softmax(h)
        return -logp[np.arange(5), target].mean()

    assert grad_check(loss, ws + bs) < 1e-6


def test_grad_check_quadratic_form():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    x = Parameter(rng.normal(size=(4, 1)), "x")
    assert grad_check(lambda: (x.T @ Tensor(a) @ x).sum(), [x]) < 1e-8


def test_grad_check_constant_function():
    p = Parameter(np.ones(3), "p")
    assert grad_check(lambda: Tensor(np.array(2.5)) + (p * 0.0).sum(), [p]) == 0.0


def test_grad_check_rejects_fp32():
    p = Parameter(np.ones(3, np.float32), "p")
    with pytest.raises(TypeError):
        grad_check(lambda: p.sum(), [p])


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        apply("matmul", [Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))])
    with pytest.raises(ad.ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_overflow_is_reported():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1000.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.log(Tensor([0.0]))


def test_disconnected_parameter_warns_and_gets_zero():
    a = Parameter(np.ones(2), "a")
    b = Parameter(np.ones(2), "b")
    with Tape() as tape:
        loss = (a * a).sum()
    with pytest.warns(UserWarning, match="disconnected"):
        backward(loss, tape, [a, b])
    np.testing.assert_array_equal(b.grad, 0)


def test_gradients_accumulate_until_zeroed():
    p = Parameter(np.array([1.0, 2.0]), "p")
    for _ in range(2):
        with Tape() as tape:
            loss = (p * 3.0).sum()
        backward(loss, tape, [p])
    np.testing.assert_array_equal(p.grad, [6, 6])
    p.zero_grad()
    np.testing.assert_array_equal(p.grad, [0, 0])


def test_no_recording_without_tape():
    p = Parameter(np.ones(2), "p")
    out = p * 2.0
    assert not out.requires_grad


def test_tape_is_topologically_ordered():
    p = Parameter(np.ones(3), "p")
    with Tape() as tape:
        ad.exp(p * 2.0).sum()
    produced = set()
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and not isinstance(t, Parameter):
                assert id(t) in produced
        produced.add(id(rec.output))


# --- per-primitive vector-Jacobian products against central differences ---

UNARY = {
    "exp": lambda x: ad.exp(x),
    "log": lambda x: ad.log(x),
    "sigmoid": lambda x: ad.sigmoid(x),
    "relu": lambda x: ad.relu(x),
    "gelu": lambda x: ad.gelu(x),
    "abs": lambda x: ad.abs(x),
    "neg": lambda x: -x,
    "softmax": lambda x: ad.softmax(x, axis=-1),
    "log_softmax": lambda x: ad.log_softmax(x, axis=0),
    "layer_norm": lambda x: ad.layer_norm(x, eps=1e-5),
    "sum": lambda x: x.sum(axes=0, keepdims=True),
    "mean": lambda x: x.mean(axes=-1),
    "amax": lambda x: ad.amax(x, axes=-1),
    "amin": lambda x: ad.amin(x, axes=0),
    "reshape": lambda x: x.reshape(-1),
    "transpose": lambda x: x.T,
    "slice": lambda x: x[1:, ::2],
    "broadcast": lambda x: ad.broadcast(x, (2,) + x.shape),
}
BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "matmul": lambda a, b: a @ b.T,
    "maximum": lambda a, b: ad.maximum(a, b),
    "minimum": lambda a, b: ad.minimum(a, b),
    "concat": lambda a, b: ad.concat([a, b], axis=1),
}


def _vjp_error(build, params, rng):
    out_shape = build().shape
    probe = Tensor(rng.normal(size=out_shape))

    def fn():
        return (build() * probe).sum()

    return grad_check(fn, params)


@settings(max_examples=100, deadline=None)
@given(op=st.sampled_from(sorted(UNARY) + sorted(BINARY)), rows=st.integers(2, 4),
       cols=st.integers(2, 5), seed=st.integers(0, 2**31 - 1))
def test_every_primitive_vjp_matches_finite_differences(op, rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rows, cols))
    if op == "log":
        a = np.abs(a) + 0.5
    if op in ("relu", "abs"):
        a = np.where(np.abs(a) < 0.05, 0.5, a)  # keep clear of the kink
    x = Parameter(a, "x")
    if op in UNARY:
        err = _vjp_error(lambda: UNARY[op](x), [x], rng)
    else:
        b = rng.normal(size=(rows, cols))
        if op == "div":
            b = np.sign(b) * (np.abs(b) + 0.5)
        if op in ("maximum", "minimum"):
            b = np.where(np.abs(a - b) < 0.05, b + 0.3, b)
        y = Parameter(b, "y")
        err = _vjp_error(lambda: BINARY[op](x, y), [x, y], rng)
    assert err < 1e-6, (op, err)


def test_broadcast_gradients_reduce_to_input_shape():
    rng = np.random.default_rng(1)
    x = Parameter(rng.normal(size=(3, 4)), "x")
    bias = Parameter(rng.normal(size=4), "bias")
    col = Parameter(rng.normal(size=(3, 1)), "col")
    assert grad_check(lambda: ((x + bias) * col).sum(), [x, bias, col]) < 1e-8
    assert bias.grad.shape == (4,)
    assert col.grad.shape == (3, 1)


def test_batched_matmul_gradients():
    rng = np.random.default_rng(2)
    a = Parameter(rng.normal(size=(2, 3, 4)), "a")
    b = Parameter(rng.normal(size=(4, 5)), "b")
    assert grad_check(lambda: ad.sigmoid(a @ b).sum(), [a, b]) < 1e-8


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), ca=st.floats(-3, 3), cb=st.floats(-3, 3))
def test_backward_is_linear(seed, ca, cb):
    rng = np.random.default_rng(seed)
    w = Parameter(rng.normal(size=(3, 3)), "w")

    def f():
        return ad.gelu(w @ w).sum()

    def g():
        return ad.softmax(w, axis=0).mean() + (w * w).sum()

    gf, = grads_of(f, w)
    gg, = grads_of(g, w)
    gc, = grads_of(lambda: f() * ca + g() * cb, w)
    np.testing.assert_allclose(gc, ca * gf + cb * gg, rtol=0, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), rows=st.integers(1, 6), cols=st.integers(1, 9))
def test_softmax_and_layer_norm_row_properties(seed, rows, cols):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(scale=10, size=(rows, cols)))
    sm = ad.softmax(x, axis=-1).data
    np.testing.assert_allclose(sm.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    ln = ad.layer_norm(x).data
    assert np.all(np.abs(ln.mean(axis=-1)) < 1e-10)


def test_softmax_is_overflow_safe():
    out = ad.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0])


def test_repeat_runs_are_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        w = Parameter(rng.normal(size=(6, 6)), "w")
        x = Tensor(rng.normal(size=(4, 6)))
        (g,) = grads_of(lambda: ad.layer_norm(ad.gelu(x @ w)).sum() + ad.softmax(x @ w).mean(), w)
        return g

    assert run().tobytes() == run().tobytes()


def test_fp32_stays_fp32():
    p = Parameter(np.ones((2, 2), np.float32), "p")
    with Tape() as tape:
        out = (ad.gelu(p @ p) * 0.5 + 1.0).sum()
    assert out.dtype == np.float32
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        backward(out, tape, [p])
    assert p.grad.dtype == np.float32
