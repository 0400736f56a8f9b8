import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptmoe.numerics import (
    Adam,
    AdamState,
    DegenerateDistributionError,
    NonFiniteError,
    ShapeError,
    Tensor,
    adam_step,
    check_gradients,
    clip_grad_norm,
    concat,
    cross_entropy,
    exp,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    no_grad,
    relu,
    reshape,
    rotary,
    rotary_tables,
    scatter_rows,
    sigmoid,
    silu,
    softmax,
    sqrt,
    stack,
    sum_,
    take_rows,
    tanh,
    transpose,
    where_const,
)


def leaf(rng, *shape, positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


# -- matmul ------------------------------------------------------------------
def test_matmul_identity_and_by_hand():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    oracle = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                oracle[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(matmul(Tensor(a), Tensor(b)).data - oracle)) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# -- softmax -------------------------------------------------------------------
def test_softmax_examples():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = softmax(Tensor([2.0, 1.0, -np.inf, -np.inf])).data
    e = math.exp(2) / (math.exp(2) + math.exp(1))
    assert np.allclose(out, [e, 1 - e, 0, 0], atol=1e-12)
    assert abs(out[0] - 0.7311) < 1e-4 and out[2] == 0.0 and out[3] == 0.0


def test_softmax_all_masked_is_degenerate():
    with pytest.raises(DegenerateDistributionError):
        softmax(Tensor([[0.0, 1.0], [-np.inf, -np.inf]]))


def test_softmax_rejects_nan():
    with pytest.raises(NonFiniteError):
        softmax(Tensor([0.0, np.nan]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(xs, c):
    x = np.array(xs)
    a = softmax(Tensor(x)).data
    b = softmax(Tensor(x + c)).data
    assert abs(a.sum() - 1.0) < 1e-9
    assert np.allclose(a, b, atol=1e-9)


# -- layer norm ------------------------------------------------------------------
def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(layer_norm(Tensor([5.0, 5.0, 5.0]), one, zero).data, 0.0)
    out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
    assert np.allclose(out, [1.0, -1.0], atol=1e-9)
    rng = np.random.default_rng(1)
    x = rng.normal(size=16)
    row = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-5).data
    assert abs(row.mean()) < 1e-10
    assert abs(row.var() - x.var() / (x.var() + 1e-5)) < 1e-12


# -- cross entropy --------------------------------------------------------------------
def test_cross_entropy_examples():
    assert abs(cross_entropy(Tensor(np.zeros((1, 4))), [2]).data - math.log(4)) < 1e-12
    big = np.zeros((1, 3))
    big[0, 1] = 60.0
    assert cross_entropy(Tensor(big), [1]).data < 1e-20
    rng = np.random.default_rng(2)
    logits, t = rng.normal(size=(3, 5)), [4, 0, 2]
    manual = np.mean([-(logits[i, t[i]] - math.log(np.exp(logits[i]).sum())) for i in range(3)])
    assert abs(cross_entropy(Tensor(logits), t).data - manual) < 1e-10


def test_cross_entropy_bad_target_and_ignore_index():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(3, 4))
    full = cross_entropy(Tensor(logits[[0, 2]]), [1, 3]).data
    assert abs(cross_entropy(Tensor(logits), [1, -1, 3], ignore_index=-1).data - full) < 1e-14


# -- backward ---------------------------------------------------------------------------
def test_backward_simple_rules():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    sum_(x).backward()
    assert np.array_equal(x.grad, np.ones(3))
    x.zero_grad()
    sum_(x * x).backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_on_non_scalar_is_shape_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_backward_twice_accumulates():
    rng = np.random.default_rng(4)
    x = leaf(rng, 3, 4)
    loss = sum_(tanh(x) * x)
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    assert np.allclose(x.grad, 2 * first, rtol=0, atol=1e-15)


def test_shared_use_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    sum_(x * 3.0 + x * x).backward()
    assert np.allclose(x.grad, [3.0 + 4.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


UNARY = {
    "exp": exp,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "silu": silu,
    "relu": relu,
    "neg_pow": lambda t: t**2.0,
    "softmax": lambda t: softmax(t, axis=-1),
    "log_softmax": lambda t: log_softmax(t, axis=-1),
    "transpose": lambda t: transpose(t, (1, 0)),
    "reshape": lambda t: reshape(t, (-1,)),
    "mean": lambda t: mean(t, axis=0),
    "getitem": lambda t: t[1:, ::2],
    "fancy": lambda t: t[np.array([0, 0, 2])],
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(5)
    x = leaf(rng, 3, 4)
    if name == "relu":
        x.data[np.abs(x.data) < 0.1] += 0.3  # keep away from the kink
    w = rng.normal(size=UNARY[name](x).shape)
    assert check_gradients(lambda: sum_(UNARY[name](x) * w), [x]) < 1e-4


def test_positive_domain_gradients():
    rng = np.random.default_rng(6)
    x = leaf(rng, 4, 3, positive=True)
    w = rng.normal(size=(4, 3))
    assert check_gradients(lambda: sum_(log(x) * w + sqrt(x) * w + (1.0 / x)), [x]) < 1e-4


def test_binary_and_structural_gradients():
    rng = np.random.default_rng(7)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    c = leaf(rng, 3, 1)
    w = rng.normal(size=(2, 3, 5))
    assert check_gradients(lambda: sum_(matmul(a, b) * w), [a, b]) < 1e-4
    assert check_gradients(lambda: sum_((a * c - a / (c * c + 1.0)) * a), [a, c]) < 1e-4
    rows = leaf(rng, 6, 3)
    idx = np.array([[0, 5], [5, 2]])
    w2 = rng.normal(size=(2, 2, 3))
    assert check_gradients(lambda: sum_(take_rows(rows, idx) * w2), [rows]) < 1e-4
    vals = leaf(rng, 3, 3)
    w3 = rng.normal(size=(5, 3))
    assert check_gradients(lambda: sum_(scatter_rows(5, np.array([4, 0, 2]), vals) * w3), [vals]) < 1e-4
    p, q = leaf(rng, 2, 3), leaf(rng, 4, 3)
    w4 = rng.normal(size=(6, 3))
    assert check_gradients(lambda: sum_(concat([p, q], axis=0) * w4), [p, q]) < 1e-4
    w5 = rng.normal(size=(2, 2, 3))
    assert check_gradients(lambda: sum_(stack([p, p * 2.0], axis=0) * w5), [p]) < 1e-4
    mask = rng.random((2, 3)) < 0.5
    assert check_gradients(lambda: sum_(where_const(mask, p, 0.0) * p), [p]) < 1e-4


def test_layer_norm_and_cross_entropy_gradients():
    rng = np.random.default_rng(8)
    x, g, b = leaf(rng, 3, 5), leaf(rng, 5), leaf(rng, 5)
    w = rng.normal(size=(3, 5))
    assert check_gradients(lambda: sum_(layer_norm(x, g, b) * w), [x, g, b]) < 1e-4
    logits = leaf(rng, 4, 6)
    assert check_gradients(lambda: cross_entropy(logits, [0, 5, -1, 2], ignore_index=-1), [logits]) < 1e-4


def test_rotary_is_a_rotation_with_correct_gradient():
    rng = np.random.default_rng(9)
    x = leaf(rng, 1, 2, 5, 8)
    cos, sin = rotary_tables(5, 8)
    out = rotary(x, cos, sin).data
    assert np.allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x.data, axis=-1))
    assert np.allclose(out[:, :, 0], x.data[:, :, 0])  # position 0 is unrotated
    w = rng.normal(size=out.shape)
    assert check_gradients(lambda: sum_(rotary(x, cos, sin) * w), [x]) < 1e-4


def test_operations_are_deterministic():
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=(6, 7)), rng.normal(size=(7, 5))
    r1 = softmax(matmul(Tensor(a), Tensor(b))).data
    r2 = softmax(matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


# -- optimizer ---------------------------------------------------------------------
def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.array([1.0, 1.0])}, state, lr=0.1)
    before = p["w"].copy()
    m_before = state.m["w"].copy()
    p2 = {"w": before.copy()}
    state2 = AdamState(step=state.step, m={"w": m_before * 0}, v={"w": state.v["w"] * 0})
    adam_step(p2, {"w": np.zeros(2)}, state2, lr=0.1)
    assert np.array_equal(p2["w"], before)
    adam_step(p, {"w": np.zeros(2)}, state, lr=0.0)
    assert np.allclose(state.m["w"], 0.9 * m_before)


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": np.array([3.0, -0.01, 50.0])}, AdamState(), lr=0.01)
    assert np.allclose(p["w"], [-0.01, 0.01, -0.01], atol=1e-8)


def test_adam_descends_a_parabola():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        sum_(w * w).backward()
        opt.step()
    assert abs(w.data[0]) < 0.5


def test_adam_non_finite_gradient_names_parameter():
    p = {"layer.w": np.zeros(2)}
    with pytest.raises(NonFiniteError, match="layer.w"):
        adam_step(p, {"layer.w": np.array([np.nan, 0.0])}, AdamState(), lr=0.1)
    assert np.array_equal(p["layer.w"], np.zeros(2))


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm({"a": a}, 1.0) == pytest.approx(5.0)
    assert np.allclose(a.grad, [0.6, 0.8])
