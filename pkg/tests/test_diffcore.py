"""Unit and property tests for the differentiable core."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textvisual.diffcore import (
    AdamConfig,
    GradCheckResult,
    LSTMCellParams,
    ParamSlot,
    adam_step,
    affine,
    affine_backward,
    clip_global_norm,
    dropout,
    dropout_forward,
    finite_diff_check,
    lstm_cell,
    lstm_cell_backward,
    squared_distance,
    squared_distance_grad,
)
from textvisual.errors import ConfigError, NumericError


def central_diff(f, arr, h=1e-5):
    """Independent central-difference gradient of scalar f over arr."""
    grad = np.zeros_like(arr)
    for idx in range(arr.size):
        orig = arr.flat[idx]
        arr.flat[idx] = orig + h
        lp = f()
        arr.flat[idx] = orig - h
        lm = f()
        arr.flat[idx] = orig
        grad.flat[idx] = (lp - lm) / (2 * h)
    return grad


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


# ---------------------------------------------------------------------------
# affine


def test_affine_identity():
    x = np.array([[1.0, 2.0]])
    w = np.eye(2)
    b = np.zeros(2)
    np.testing.assert_array_equal(affine(x, w, b), [[1.0, 2.0]])


def test_affine_hand_arithmetic():
    x = np.array([[1.0, 1.0]])
    w = np.array([[2.0, 3.0], [4.0, 5.0]])
    b = np.array([1.0, 1.0])
    np.testing.assert_array_equal(affine(x, w, b), [[7.0, 9.0]])


def test_affine_shape_mismatch():
    with pytest.raises(ConfigError):
        affine(np.ones((2, 3)), np.ones((4, 2)), np.ones(2))


def test_affine_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=2)
    proj = rng.normal(size=(3, 2))  # fixed weights making the output scalar

    def loss():
        return float(np.sum(affine(x, w, b) * proj))

    d_x, d_w, d_b = affine_backward(x, w, proj)
    assert rel_err(d_x, central_diff(loss, x)) < 1e-6
    assert rel_err(d_w, central_diff(loss, w)) < 1e-6
    assert rel_err(d_b, central_diff(loss, b)) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_affine_backward_property(seed):
    rng = np.random.default_rng(seed)
    rows, inner, cols = rng.integers(1, 5, size=3)
    x = rng.normal(size=(rows, inner))
    w = rng.normal(size=(inner, cols))
    b = rng.normal(size=cols)
    proj = rng.normal(size=(rows, cols))

    def loss():
        return float(np.sum(affine(x, w, b) * proj))

    d_x, d_w, d_b = affine_backward(x, w, proj)
    for analytic, arr in ((d_x, x), (d_w, w), (d_b, b)):
        assert rel_err(analytic, central_diff(arr=arr, f=loss)) < 1e-4


# ---------------------------------------------------------------------------
# lstm cell


def make_cell(rng, in_size, hidden, scale=0.5):
    return LSTMCellParams(
        wx=rng.normal(0, scale, (in_size, 4 * hidden)),
        wh=rng.normal(0, scale, (hidden, 4 * hidden)),
        b=rng.normal(0, scale, 4 * hidden),
    )


def test_lstm_all_zero_params():
    p = LSTMCellParams(wx=np.zeros((3, 8)), wh=np.zeros((2, 8)), b=np.zeros(8))
    x = np.ones((1, 3))
    h, c, _ = lstm_cell(x, np.zeros((1, 2)), np.zeros((1, 2)), p)
    np.testing.assert_array_equal(h, np.zeros((1, 2)))
    np.testing.assert_array_equal(c, np.zeros((1, 2)))


def test_lstm_saturated_forget_gate_carries_cell_state():
    hidden = 3
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 10.0  # forget gate ~1
    p = LSTMCellParams(wx=np.zeros((2, 4 * hidden)), wh=np.zeros((hidden, 4 * hidden)), b=b)
    c_prev = np.array([[0.3, -1.2, 0.8]])
    h, c, _ = lstm_cell(np.ones((1, 2)), np.zeros((1, hidden)), c_prev, p)
    np.testing.assert_allclose(c, c_prev, atol=1e-4)
    np.testing.assert_allclose(h, 0.5 * np.tanh(c_prev), atol=1e-4)


def test_lstm_cell_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    p = make_cell(rng, in_size=3, hidden=2)
    x = rng.normal(size=(2, 3))
    h0 = rng.normal(size=(2, 2))
    c0 = rng.normal(size=(2, 2))
    ph = rng.normal(size=(2, 2))
    pc = rng.normal(size=(2, 2))

    def loss():
        h, c, _ = lstm_cell(x, h0, c0, p)
        return float(np.sum(h * ph) + np.sum(c * pc))

    _, _, cache = lstm_cell(x, h0, c0, p)
    d_x, d_h0, d_c0, d_wx, d_wh, d_b = lstm_cell_backward(cache, ph, pc, p)
    for analytic, arr in (
        (d_x, x),
        (d_h0, h0),
        (d_c0, c0),
        (d_wx, p.wx),
        (d_wh, p.wh),
        (d_b, p.b),
    ):
        assert rel_err(analytic, central_diff(loss, arr)) < 1e-5


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lstm_cell_weight_gradients_property(seed):
    rng = np.random.default_rng(seed)
    in_size = int(rng.integers(1, 4))
    hidden = int(rng.integers(1, 4))
    batch = int(rng.integers(1, 3))
    p = make_cell(rng, in_size, hidden)
    x = rng.normal(size=(batch, in_size))
    h0 = rng.normal(size=(batch, hidden))
    c0 = rng.normal(size=(batch, hidden))
    ph = rng.normal(size=(batch, hidden))

    def loss():
        h, _, _ = lstm_cell(x, h0, c0, p)
        return float(np.sum(h * ph))

    _, _, cache = lstm_cell(x, h0, c0, p)
    d_x, _, _, d_wx, d_wh, d_b = lstm_cell_backward(cache, ph, np.zeros_like(ph), p)
    for analytic, arr in ((d_wx, p.wx), (d_wh, p.wh), (d_b, p.b), (d_x, x)):
        assert rel_err(analytic, central_diff(loss, arr)) < 1e-4


def test_lstm_from_gates_round_trip():
    rng = np.random.default_rng(5)
    gates = ("input", "forget", "output", "candidate")
    w = {g: rng.normal(size=(3, 2)) for g in gates}
    u = {g: rng.normal(size=(2, 2)) for g in gates}
    b = {g: rng.normal(size=2) for g in gates}
    p = LSTMCellParams.from_gates(w, u, b)
    assert p.wx.shape == (3, 8)
    np.testing.assert_array_equal(p.wx[:, 2:4], w["forget"])
    np.testing.assert_array_equal(p.b[6:], b["candidate"])


# ---------------------------------------------------------------------------
# dropout


def test_dropout_inference_identity():
    x = np.random.default_rng(0).normal(size=(7, 9))
    out = dropout(x, 0.25, None, training=False)
    assert out is x


def test_dropout_rate_zero_identity():
    x = np.random.default_rng(0).normal(size=(4, 4))
    out = dropout(x, 0.0, np.random.default_rng(1), training=True)
    np.testing.assert_array_equal(out, x)


def test_dropout_rate_one_rejected():
    with pytest.raises(ConfigError):
        dropout(np.ones(3), 1.0, np.random.default_rng(0), training=True)


def test_dropout_statistics():
    rng = np.random.default_rng(99)
    x = np.ones(10**6)
    out, mask = dropout_forward(x, 0.25, rng)
    survivors = np.count_nonzero(out) / x.size
    assert abs(survivors - 0.75) < 0.005
    assert abs(out.mean() - x.mean()) < 0.01 * abs(x.mean())
    np.testing.assert_array_equal(out, x * mask)


def test_dropout_seeded_reproducibility():
    x = np.random.default_rng(0).normal(size=1000)
    a, _ = dropout_forward(x, 0.25, np.random.default_rng(7))
    b, _ = dropout_forward(x, 0.25, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# squared distance


def test_squared_distance_examples():
    assert squared_distance(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert squared_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 2.0
    with pytest.raises(ConfigError):
        squared_distance(np.ones(3), np.ones(4))


def test_squared_distance_gradient():
    rng = np.random.default_rng(11)
    a = rng.normal(size=5)
    b = rng.normal(size=5)
    d_a, d_b = squared_distance_grad(a, b)
    assert rel_err(d_a, central_diff(lambda: squared_distance(a, b), a)) < 1e-6
    assert rel_err(d_b, central_diff(lambda: squared_distance(a, b), b)) < 1e-6


# ---------------------------------------------------------------------------
# adam


def scalar_slot(value, grad=None):
    s = ParamSlot("s", np.array([value], dtype=np.float64))
    s.grad = np.array([0.0 if grad is None else grad], dtype=np.float64)
    return s


def test_adam_zero_gradient_is_identity():
    rng = np.random.default_rng(2)
    slots = [ParamSlot(f"p{i}", rng.normal(size=(3, 2))) for i in range(3)]
    before = [s.value.copy() for s in slots]
    for s in slots:
        s.ensure_grad()
    cfg = AdamConfig(learning_rate=0.5)
    adam_step(slots, cfg)
    for s, prev in zip(slots, before):
        np.testing.assert_array_equal(s.value, prev)
    assert cfg.step_count == 1


def test_adam_first_step_moves_by_learning_rate():
    s = scalar_slot(1.0, grad=1.0)
    cfg = AdamConfig(learning_rate=0.001)
    adam_step([s], cfg)
    delta = s.value[0] - 1.0
    assert abs(delta + 0.001) < 1e-6


def test_adam_five_step_trace_matches_scalar_oracle():
    # independent plain-float Adam
    beta1, beta2, eps, lr = 0.99, 0.999, 1e-8, 0.01
    theta, m, v = 0.7, 0.0, 0.0
    grads = [1.0, -0.5, 0.25, 2.0, -1.0]
    oracle = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        theta -= lr * (m / (1 - beta1**t)) / ((v / (1 - beta2**t)) ** 0.5 + eps)
        oracle.append(theta)

    s = scalar_slot(0.7)
    cfg = AdamConfig(learning_rate=lr, beta1=beta1, beta2=beta2, epsilon=eps)
    trace = []
    for g in grads:
        s.grad[0] = g
        adam_step([s], cfg)
        trace.append(float(s.value[0]))
    np.testing.assert_allclose(trace, oracle, atol=1e-10, rtol=0)


def test_adam_nan_gradient_names_slot():
    s = scalar_slot(0.0, grad=float("nan"))
    s.name = "enc.broken"
    with pytest.raises(NumericError, match="enc.broken"):
        adam_step([s], AdamConfig(learning_rate=0.1))


def test_adam_skips_frozen_slots_and_zeroes_grads():
    frozen = ParamSlot("frozen", np.ones(3), trainable=False)
    live = scalar_slot(1.0, grad=2.0)
    adam_step([frozen, live], AdamConfig(learning_rate=0.1))
    np.testing.assert_array_equal(frozen.value, np.ones(3))
    np.testing.assert_array_equal(live.grad, [0.0])


def test_adam_default_betas():
    cfg = AdamConfig(learning_rate=0.1)
    assert cfg.beta1 == 0.99 and cfg.beta2 == 0.999 and cfg.epsilon == 1e-8


def test_clip_global_norm():
    a = scalar_slot(0.0, grad=3.0)
    b = scalar_slot(0.0, grad=4.0)
    norm = clip_global_norm([a, b], 1.0)
    assert abs(norm - 5.0) < 1e-12
    assert abs(a.grad[0] - 0.6) < 1e-12
    assert abs(b.grad[0] - 0.8) < 1e-12


# ---------------------------------------------------------------------------
# finite-difference checker


def _affine_model(rng):
    x = rng.normal(size=(2, 3))
    w = ParamSlot("w", rng.normal(size=(3, 2)))
    b = ParamSlot("b", rng.normal(size=2))
    proj = rng.normal(size=(2, 2))

    def forward():
        return float(np.sum(affine(x, w.value, b.value) * proj))

    _, d_w, d_b = affine_backward(x, w.value, proj)
    w.grad = d_w
    b.grad = d_b
    return forward, [w, b]


def test_finite_diff_check_affine_model():
    forward, slots = _affine_model(np.random.default_rng(21))
    result = finite_diff_check(forward, slots, h=1e-5)
    assert result.max_rel_error < 1e-7


def test_finite_diff_check_flags_corrupted_gradient():
    forward, slots = _affine_model(np.random.default_rng(22))
    slots[0].grad *= 1.10
    result = finite_diff_check(forward, slots, h=1e-5)
    assert result.max_rel_error > 0.05
    assert result.slot == "w"


def test_finite_diff_check_rejects_nondeterministic_forward():
    rng = np.random.default_rng(0)
    s = scalar_slot(1.0, grad=0.0)
    with pytest.raises(NumericError, match="deterministic"):
        finite_diff_check(lambda: float(rng.normal()), [s])
