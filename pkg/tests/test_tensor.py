import math
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from poseface import tensor as T
from poseface.errors import DegenerateError, NumericError, ShapeError
from poseface.model import orth_penalty
from poseface.tensor import SgdConfig, Sgd, Tape, Tensor, sgd_step

from oracles import max_rel_error, numeric_grad

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_matmul_with_identity_extension_matches_hand_product():
    a = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = Tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal((a @ b).data, [[1.0, 2.0], [4.0, 5.0]])


def test_l2_normalize_row_3_4():
    np.testing.assert_array_equal(T.l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])


def test_logsumexp_no_overflow():
    out = T.logsumexp(Tensor([1000.0, 1000.0])).item()
    assert out == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.ones((2, 1))), Tensor(np.ones((2, 3))))  # no broadcasting


def test_non_finite_input_is_rejected_in_float64():
    with pytest.raises(NumericError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NumericError):
        T.log(Tensor([0.0]))


def test_float32_skips_finiteness_check():
    t = T.log(Tensor(np.array([0.0], dtype=np.float32)))
    assert np.isneginf(t.data[0])


def test_l2_normalize_degenerate_row():
    with pytest.raises(DegenerateError):
        T.l2_normalize(Tensor([[0.0, 0.0]]))


def test_arccos_forward_exact_and_gradient_finite_at_endpoints():
    x = leaf([1.0, -1.0, 0.3])
    y = T.arccos(x)
    np.testing.assert_allclose(y.data, [0.0, math.pi, math.acos(0.3)], rtol=0, atol=1e-15)
    T.backward(T.sum_(y))
    assert np.isfinite(x.grad).all()
    expected_clamped = -1.0 / math.sqrt(1.0 - (1.0 - T.ARCCOS_EPS) ** 2)
    assert x.grad[0] == pytest.approx(expected_clamped)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
    T.backward(T.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_grad_of_half_squared_norm_is_x():
    x = leaf(np.random.default_rng(1).normal(size=5))
    T.backward(T.scale(T.sum_(x * x), 0.5))
    np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=1e-15)


def test_orth_penalty_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    wi, wp = rng.normal(size=(8, 4)), rng.normal(size=(8, 3))
    W_I, W_P = leaf(wi), leaf(wp)
    T.backward(orth_penalty(W_I, W_P))
    num_i = numeric_grad(lambda w: orth_penalty(Tensor(w), Tensor(wp)).item(), wi)
    num_p = numeric_grad(lambda w: orth_penalty(Tensor(wi), Tensor(w)).item(), wp)
    assert max_rel_error(W_I.grad, num_i) < 1e-5
    assert max_rel_error(W_P.grad, num_p) < 1e-5


def test_gradients_accumulate_over_fan_out():
    x = leaf([2.0, -1.0])
    T.backward(T.sum_(x * x + x))  # x used three times
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)
    T.backward(T.sum_(x))  # second call accumulates
    np.testing.assert_allclose(x.grad, 2 * x.data + 2)


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        T.backward(leaf([1.0, 2.0]))


def test_tape_is_topological_and_visits_once():
    x = leaf([1.0, 2.0])
    y = x * x
    loss = T.sum_(y + y)
    tape = Tape.record(loss)
    pos = {id(n): k for k, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(3, 4))
    f = lambda x: T.sum_(T.sigmoid(x) * x)
    g = lambda x: T.norm(T.l2_normalize(x))
    a, b = 0.7, -2.3
    x1, x2, x3 = leaf(data), leaf(data), leaf(data)
    T.backward(f(x1))
    T.backward(g(x2))
    T.backward(a * f(x3) + b * g(x3))
    np.testing.assert_allclose(x3.grad, a * x1.grad + b * x2.grad, rtol=0, atol=1e-10)


def test_replay_is_bitwise_deterministic():
    rng = np.random.default_rng(4)
    data = rng.normal(size=(5, 6))
    w = rng.normal(size=(6, 3))
    run = lambda: T.logsumexp(T.relu(Tensor(data) @ Tensor(w))).data.copy()
    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# gradient checker
# ---------------------------------------------------------------------------

def test_grad_check_sum_of_squares():
    x = Tensor(np.random.default_rng(5).normal(size=7))
    assert T.grad_check(lambda t: T.sum_(t * t), x) < 1e-8


def test_grad_check_detects_a_wrong_gradient():
    def bad(a):
        return Tensor._result(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")  # missing factor 2
    x = Tensor(np.array([1.5, -2.0]))
    assert T.grad_check(lambda t: T.sum_(bad(t)), x) > 0.1


def test_grad_check_raises_on_non_finite():
    x = Tensor(np.array([1e-7]))
    with pytest.raises(NumericError):
        T.grad_check(lambda t: T.sum_(T.log(t)), x, step=1e-6)


# every primitive, on random smooth points
def _unary_cases():
    pos = lambda rng, shape: rng.uniform(0.5, 2.0, size=shape)
    any_ = lambda rng, shape: rng.normal(size=shape)
    away = lambda rng, shape: rng.choice([-1, 1], size=shape) * rng.uniform(0.1, 2.0, size=shape)
    unit = lambda rng, shape: rng.uniform(-0.9, 0.9, size=shape)
    return {
        "transpose": (any_, lambda t: T.sum_(T.transpose(t) * Tensor(np.arange(6.0).reshape(3, 2)))),
        "reshape": (any_, lambda t: T.sum_(T.reshape(t, (3, 2)) * Tensor(np.arange(6.0).reshape(3, 2)))),
        "neg": (any_, lambda t: T.sum_(T.neg(t) * t)),
        "scale": (any_, lambda t: T.sum_(T.scale(t, 3.0) * t)),
        "shift": (any_, lambda t: T.sum_(T.shift(t, 1.5) * t)),
        "relu": (away, lambda t: T.sum_(T.relu(t) * t)),
        "sigmoid": (any_, lambda t: T.sum_(T.sigmoid(t))),
        "exp": (any_, lambda t: T.sum_(T.exp(t))),
        "log": (pos, lambda t: T.sum_(T.log(t))),
        "cos": (any_, lambda t: T.sum_(T.cos(t))),
        "arccos": (unit, lambda t: T.sum_(T.arccos(t))),
        "sum_axis0": (any_, lambda t: T.sum_(T.sum_(t, axis=0) * Tensor([1.0, -2.0, 0.5]))),
        "sum_axis1": (any_, lambda t: T.sum_(T.sum_(t, axis=1) * Tensor([1.0, -2.0]))),
        "mean": (any_, lambda t: T.mean(t * t)),
        "l2_normalize_rows": (any_, lambda t: T.sum_(T.l2_normalize(t, 1) * Tensor(np.arange(6.0).reshape(2, 3)))),
        "l2_normalize_cols": (any_, lambda t: T.sum_(T.l2_normalize(t, 0) * Tensor(np.arange(6.0).reshape(2, 3)))),
        "norm": (any_, lambda t: T.norm(t)),
        "row_norms": (any_, lambda t: T.sum_(T.row_norms(t))),
        "gather": (any_, lambda t: T.sum_(T.gather(t, [2, 0]) * T.gather(t, [2, 0]))),
        "scatter": (any_, lambda t: T.sum_(T.scatter(T.sum_(t, axis=1), [1, 2], 3) * Tensor(np.arange(6.0).reshape(2, 3)))),
        "logsumexp": (any_, lambda t: T.sum_(T.logsumexp(t))),
        "select": (any_, lambda t: T.sum_(T.select(np.array([[1, 0, 1], [0, 1, 0]], bool), t * t, T.exp(t)))),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_primitive_gradients_on_random_points(name):
    sampler, f = _unary_cases()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        worst = max(worst, T.grad_check(f, Tensor(sampler(rng, (2, 3)))))
    assert worst < 1e-5


@pytest.mark.parametrize("name", ["matmul", "add", "sub", "mul", "add_bias"])
def test_binary_primitive_gradients(name):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        a = leaf(rng.normal(size=(2, 3)))
        b = leaf(rng.normal(size=(3, 2) if name == "matmul" else (3,) if name == "add_bias" else (2, 3)))
        op = {"matmul": T.matmul, "add": T.add, "sub": T.sub, "mul": T.mul, "add_bias": T.add_bias}[name]
        worst = max(worst, T.grad_check_params(lambda: T.sum_(T.sigmoid(op(a, b))), [a, b]))
    assert worst < 1e-5


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------

def test_sgd_plain_step():
    p = leaf([1.0])
    sgd_step([p], [np.array([0.5])], SgdConfig(1.0, 0.0, 0.0), 0, {})
    assert p.data[0] == 0.5


def test_sgd_momentum_two_steps():
    p = leaf([0.0])
    vel = {}
    cfg = SgdConfig(1.0, 0.9, 0.0)
    for _ in range(2):
        sgd_step([p], [np.array([1.0])], cfg, 0, vel)
    assert p.data[0] == pytest.approx(-2.9, abs=1e-15)


def test_sgd_schedule():
    cfg = SgdConfig(0.1, 0.9, 0.0, ((0, 0.1), (5, 0.01)))
    assert cfg.lr_at(4) == 0.1 and cfg.lr_at(5) == 0.01


def test_sgd_weight_decay_and_validation():
    p = leaf([2.0])
    sgd_step([p], [np.array([0.0])], SgdConfig(0.5, 0.0, 0.1), 0, {})
    assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.2)
    with pytest.raises(ValueError):
        SgdConfig(0.1, 1.0)
    with pytest.raises(ValueError):
        SgdConfig(0.1, 0.5, 0.0, ((5, 0.1), (5, 0.01)))
    with pytest.raises(ShapeError):
        sgd_step([p], [np.zeros(2)], SgdConfig(), 0, {})


def test_sgd_wrapper_uses_param_grads():
    p = leaf([1.0, 1.0])
    opt = Sgd([p], SgdConfig(0.1, 0.0, 0.0))
    T.backward(T.sum_(p * p))
    opt.step(0)
    np.testing.assert_allclose(p.data, [0.8, 0.8])
    opt.zero_grad()
    assert p.grad is None


@given(hnp.arrays(np.float64, st.integers(1, 6), elements=finite),
       hnp.arrays(np.float64, st.integers(1, 6), elements=finite))
def test_add_commutes_and_gradients_are_ones(a, b):
    if a.shape != b.shape:
        with pytest.raises(ShapeError):
            T.add(Tensor(a), Tensor(b))
        return
    x, y = leaf(a), leaf(b)
    out = T.add(x, y)
    np.testing.assert_array_equal(out.data, T.add(Tensor(b), Tensor(a)).data)
    T.backward(T.sum_(out))
    np.testing.assert_array_equal(x.grad, np.ones_like(a))
    np.testing.assert_array_equal(y.grad, np.ones_like(b))


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)))
def test_logsumexp_matches_direct_formula(x):
    out = T.logsumexp(Tensor(x)).data
    m = x.max(axis=1)
    np.testing.assert_allclose(out, m + np.log(np.exp(x - m[:, None]).sum(axis=1)), rtol=1e-12, atol=1e-12)
    assert np.all(out >= x.max(axis=1))
