import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rise3d.autodiff import Tape, Var, backward, finite_diff_check, gather, scatter_add
from rise3d.errors import ContractError, NumericError


def test_square_gradient():
    t = Tape()
    x = t.leaf(np.array(3.0), "x")
    g = backward(t, x * x)
    assert g["x"] == pytest.approx(6.0, abs=1e-14)


def test_sigmoid_midpoint_slope():
    # d/dr sigmoid(k (r - d)) at r = d is k / 4.
    k, d = 50.0, 1.3
    t = Tape()
    r = t.leaf(np.array(d), "r")
    y = ((r - d) * k).sigmoid()
    g = backward(t, y)
    assert g["r"] == pytest.approx(k / 4.0, rel=1e-12)


def test_linear_function_finite_difference_error_tiny():
    w = np.array([2.0, -3.0, 0.5])

    def f(x):
        return float(w @ x)

    err = finite_diff_check(f, np.array([1.0, 2.0, 3.0]), w)
    assert err < 1e-10


def test_composite_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=6)

    def build(x_arr):
        t = Tape()
        x = t.leaf(x_arr, "x")
        y = ((x * x).sum().exp() * 0.01 + (x.sigmoid() * 3.0).sum()).log()
        return t, y

    t, y = build(x0)
    g = backward(t, y)["x"]
    err = finite_diff_check(lambda v: float(build(v)[1].value), x0, g)
    assert err < 1e-7


def test_gather_scatter_adjoints():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4, 1, 0])
    v = rng.normal(size=(6, 3))

    def build(x_arr):
        t = Tape()
        x = t.leaf(x_arr, "x")
        picked = gather(x, idx) * t.constant(v)
        pooled = scatter_add(picked, np.array([0, 1, 0, 1, 2, 2]), 3)
        return t, (pooled * pooled).sum()

    t, y = build(x0)
    g = backward(t, y)["x"]
    err = finite_diff_check(lambda a: float(build(a.reshape(5, 3))[1].value),
                            x0.ravel(), g.ravel())
    assert err < 1e-6


def test_broadcast_gradients():
    rng = np.random.default_rng(2)
    col0 = rng.normal(size=4)
    m = rng.normal(size=(4, 3))
    bias0 = rng.normal(size=3)

    def build(c_arr, b_arr):
        t = Tape()
        c = t.leaf(c_arr, "c")
        b = t.leaf(b_arr, "b")
        out = c.reshape((4, 1)) * t.constant(m) + b
        return t, (out * out).sum()

    t, y = build(col0, bias0)
    g = backward(t, y)
    ec = finite_diff_check(lambda v: float(build(v, bias0)[1].value), col0, g["c"])
    eb = finite_diff_check(lambda v: float(build(col0, v)[1].value), bias0, g["b"])
    assert max(ec, eb) < 1e-7


def test_matmul_gradients_all_shapes():
    rng = np.random.default_rng(3)
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(4, 2))
    v0 = rng.normal(size=4)

    def build(a_flat):
        t = Tape()
        a = t.leaf(a_flat.reshape(3, 4), "a")
        y = ((a @ t.constant(b0)).sum() + (a @ t.constant(v0)).sum())
        return t, y

    t, y = build(a0.ravel())
    g = backward(t, y)["a"]
    err = finite_diff_check(lambda f: float(build(f)[1].value), a0.ravel(), g.ravel())
    assert err < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_linearity(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=5)

    def grad_of(fn):
        t = Tape()
        x = t.leaf(x0, "x")
        return backward(t, fn(x))["x"]

    f = lambda x: (x * x).sum()
    g = lambda x: x.sigmoid().sum()
    combined = lambda x: f(x) * alpha + g(x) * beta
    lhs = grad_of(combined)
    rhs = alpha * grad_of(f) + beta * grad_of(g)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_disconnected_leaf_gets_exact_zero():
    t = Tape()
    x = t.leaf(np.ones(3), "x")
    unused = t.leaf(np.ones(2), "unused")
    g = backward(t, (x * 2.0).sum())
    assert np.array_equal(g["unused"], np.zeros(2))
    assert np.array_equal(g["x"], np.full(3, 2.0))


def test_replay_reproduces_recorded_values():
    rng = np.random.default_rng(4)
    t = Tape()
    x = t.leaf(rng.normal(size=8), "x")
    y = ((x.exp() + 1.0).log() * x.sigmoid()).sum()
    _ = backward(t, y)
    assert t.replay() < 1e-15


def test_backward_requires_scalar():
    t = Tape()
    x = t.leaf(np.ones(3), "x")
    with pytest.raises(ContractError):
        backward(t, x * 2.0)


def test_nan_raises_numeric_error_naming_primitive():
    t = Tape()
    x = t.leaf(np.array(-1.0), "x")
    y = x.log()  # nan forward value
    with pytest.raises(NumericError, match="log"):
        backward(t, y)


def test_duplicate_leaf_names_rejected():
    t = Tape()
    t.leaf(np.ones(2), "w")
    with pytest.raises(ContractError):
        t.leaf(np.ones(2), "w")


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.ones(2), "a")
    b = t2.leaf(np.ones(2), "b")
    with pytest.raises(ContractError):
        _ = a + b


def test_backward_is_bit_reproducible():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(40, 4))
    idx = rng.integers(0, 7, size=40)

    def run():
        t = Tape()
        x = t.leaf(x0, "x")
        pooled = scatter_add(x.sigmoid(), idx, 7)
        return backward(t, (pooled * pooled).sum())["x"]

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_finite_diff_check_rejects_nan_probes():
    def f(x):
        return float("nan")

    with pytest.raises(NumericError):
        finite_diff_check(f, np.array([1.0]), np.array([0.0]))


def test_softplus_and_pow():
    t = Tape()
    x = t.leaf(np.array([0.0, 2.0]), "x")
    y = (x.softplus() + x ** 3.0).sum()
    g = backward(t, y)["x"]
    expected = 1.0 / (1.0 + np.exp(-np.array([0.0, 2.0]))) + 3.0 * np.array([0.0, 4.0])
    assert np.allclose(g, expected, rtol=1e-12)
