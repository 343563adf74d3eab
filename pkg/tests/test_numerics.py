import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cadex import numerics as nx
from cadex.errors import ContractError, DimensionError, NumericError


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


def grad_of(f, **values):
    tape = nx.Tape()
    P = tape.watch({k: np.asarray(v, dtype=np.float64) for k, v in values.items()})
    return nx.backward(tape, f(**P))


def test_matmul_examples(rng):
    I = np.eye(2)
    B = np.array([[5.0, 6], [7, 8]])
    assert np.array_equal(nx.matmul(I, B).value, B)
    assert nx.matmul(np.array([[1.0, 2]]), np.array([[3.0], [4]])).value.tolist() == [[11.0]]
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    ref = naive_matmul(a, b)
    np.testing.assert_allclose(nx.matmul(a, b).value, ref, rtol=1e-12, atol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_backward_analytic():
    assert grad_of(lambda x: x * x, x=3.0)["x"] == pytest.approx(6.0, abs=1e-15)
    g = grad_of(lambda x: nx.tsum(nx.square(x)), x=[1.0, 2.0])["x"]
    assert g.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    tape = nx.Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(ContractError):
        nx.backward(tape, x * 2.0)


def test_unused_parameter_gets_zero_grad():
    g = grad_of(lambda x, y: nx.tsum(x), x=np.ones(2), y=np.ones((2, 2)))
    assert np.array_equal(g["y"], np.zeros((2, 2)))


def _mlp_loss_fn(params, x):
    def loss(P):
        return nx.mean(nx.square(nx.tanh(nx.apply_mlp(P, "m", x))))
    return loss


def test_mlp_gradients_match_finite_differences(rng):
    params = nx.init_mlp(rng, "m", [4, 7, 6, 3])
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(scale=0.3, size=params[k].shape)
    x = rng.normal(size=(5, 4))
    loss = _mlp_loss_fn(params, x)
    tape = nx.Tape()
    grads = nx.backward(tape, loss(tape.watch(params)))
    worst = 0.0
    for name, value in params.items():
        def f(v, name=name):
            P = {k: nx.Tensor(params[k]) for k in params}
            P[name] = nx.Tensor(v)
            return loss(P).value
        fd = nx.finite_difference_grad(f, value, h=1e-5)
        worst = max(worst, np.max(np.abs(fd - grads[name]) / np.maximum(np.abs(fd), 1e-6)))
    assert worst < 1e-4


@pytest.mark.parametrize("op, x", [
    (lambda t: nx.exp(t), 0.3), (lambda t: nx.log(t), 1.7), (lambda t: nx.tanh(t), -0.4),
    (lambda t: nx.sigmoid(t), 0.9), (lambda t: nx.softplus(t), -1.2), (lambda t: nx.softplus(t), 35.0),
    (lambda t: nx.absolute(t), -0.7), (lambda t: nx.clip(t, -1, 1), 0.2), (lambda t: t / 3.0, 2.0),
    (lambda t: 1.0 / t, 2.0), (lambda t: -t, 2.0),
])
def test_elementwise_grads(op, x):
    a = grad_of(lambda x: op(x), x=x)["x"]
    fd = nx.finite_difference_grad(lambda v: op(nx.Tensor(v)).value, np.array(x))
    assert a == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_structural_ops_grads(rng):
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(6, 2))

    def f(x):
        rows = nx.take_rows(x, np.array([0, 2, 2, 3, 1, 0]))
        cat = nx.concat([nx.getitem(rows, (slice(None), slice(0, 2))), w], axis=1)
        stk = nx.stack([nx.tmax(cat, axis=0), nx.mean(cat, axis=0)], axis=0)
        n = nx.norm(nx.reshape(stk, (4, 2)), axis=-1)
        picked = nx.getitem(x, np.array([1, 1, 3]))
        return nx.tsum(n) + nx.tsum(nx.where(x.value > 0, x, nx.square(x))) + nx.tsum(picked * picked)

    a = grad_of(f, x=x)["x"]
    fd = nx.finite_difference_grad(lambda v: f(nx.Tensor(v)).value, x)
    np.testing.assert_allclose(a, fd, rtol=1e-6, atol=1e-8)


def test_take_rows_large_source_uses_scatter(rng):
    src = rng.normal(size=(300, 2))
    rows = rng.integers(0, 300, size=50)
    g = grad_of(lambda s: nx.tsum(nx.take_rows(s, rows)), s=src)["s"]
    ref = np.zeros_like(src)
    np.add.at(ref, rows, 1.0)
    assert np.array_equal(g, ref)


def test_finite_difference_examples():
    assert nx.finite_difference_grad(lambda x: x[()] ** 2, np.array(3.0)) == pytest.approx(6.0, abs=1e-8)
    assert nx.finite_difference_grad(lambda x: np.sin(x[()]), np.array(0.0)) == pytest.approx(1.0, abs=1e-9)


def test_finite_difference_non_finite():
    with pytest.raises(NumericError), np.errstate(invalid="ignore", divide="ignore"):
        nx.finite_difference_grad(lambda x: np.log(x[0]), np.array([0.0]), h=1e-5)


def test_norm_grad_at_zero_is_zero():
    g = grad_of(lambda x: nx.tsum(nx.norm(x)), x=np.zeros((2, 3)))["x"]
    assert np.array_equal(g, np.zeros((2, 3)))


@given(a=st.floats(-3, 3), b=st.floats(-3, 3),
       x=arrays(np.float64, 5, elements=st.floats(-2, 2)))
def test_backward_is_linear(a, b, x):
    f = lambda t: nx.tsum(nx.tanh(t))
    g = lambda t: nx.tsum(nx.square(t))
    combo = grad_of(lambda t: f(t) * a + g(t) * b, t=x)["t"]
    sep = a * grad_of(f, t=x)["t"] + b * grad_of(g, t=x)["t"]
    np.testing.assert_allclose(combo, sep, rtol=0, atol=1e-12)


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    nx.adam_step(p, {"w": np.zeros(2)}, nx.AdamState())
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step():
    p = {"w": np.array(0.5)}
    nx.adam_step(p, {"w": np.array(1.0)}, nx.AdamState(lr=0.1))
    assert float(p["w"]) - 0.5 == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_reference_trace():
    # hand-written Adam on f(x) = x^2
    x, m, v = 1.0, 0.0, 0.0
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    ref = []
    for t in range(1, 11):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        ref.append(x)
    p = {"x": np.array(1.0)}
    state = nx.AdamState()
    got = []
    for _ in range(10):
        nx.adam_step(p, {"x": 2 * p["x"]}, state)
        got.append(float(p["x"]))
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
    assert state.step == 10


def test_adam_nan_names_parameter():
    with pytest.raises(NumericError, match="bias"):
        nx.adam_step({"bias": np.zeros(2)}, {"bias": np.array([0.0, np.nan])}, nx.AdamState())


def test_adam_is_deterministic(rng):
    params = nx.init_mlp(rng, "m", [3, 8, 1])
    x = rng.normal(size=(16, 3))
    y = rng.normal(size=(16, 1))

    def run():
        P0 = {k: v.copy() for k, v in params.items()}
        st_ = nx.AdamState(lr=1e-2)
        for _ in range(100):
            tape = nx.Tape()
            P = tape.watch(P0)
            loss = nx.mean(nx.square(nx.apply_mlp(P, "m", x) - y))
            nx.adam_step(P0, nx.backward(tape, loss), st_)
            tape.clear()
        return P0

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_precision_names():
    assert nx.resolve_dtype("f64") == np.float64
    assert nx.resolve_dtype("f32") == np.float32
