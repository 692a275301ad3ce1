"""Minimal differentiable numeric core.

Dense float32 kernels (float64 in verification mode) with hand-written
forward/backward pairs for exactly the operator set the text encoder and
ranking losses need, plus Adam updates and a central finite-difference
gradient checker. Gradients of shared parameters accumulate additively
across every use within a step, which is what unrolled/stacked recurrence
requires.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np

from .errors import ConfigError, NumericError

DTYPE_TRAIN = np.float32
DTYPE_VERIFY = np.float64


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {name}")
    return arr


# ---------------------------------------------------------------------------
# parameter slots and Adam


@dataclass
class ParamSlot:
    """A named tensor with its gradient and Adam moment buffers.

    `grad`, `adam_m` and `adam_v` are allocated lazily with the same shape
    and dtype as `value`. Non-trainable slots are never touched by the
    optimizer.
    """

    name: str
    value: np.ndarray
    trainable: bool = True
    grad: Optional[np.ndarray] = None
    adam_m: Optional[np.ndarray] = None
    adam_v: Optional[np.ndarray] = None

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def add_grad(self, g: np.ndarray) -> None:
        self.ensure_grad()
        self.grad += g


@dataclass
class AdamConfig:
    learning_rate: float
    beta1: float = 0.99
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for nm in ("beta1", "beta2"):
            v = getattr(self, nm)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{nm} must lie in (0,1), got {v}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.step_count < 0:
            raise ConfigError(f"step_count must be nonnegative, got {self.step_count}")


def adam_step(slots: Iterable[ParamSlot], cfg: AdamConfig) -> None:
    """One Adam update with bias correction over all trainable slots.

    Increments cfg.step_count by exactly one and zeroes the gradients it
    consumed. Raises NumericError naming the slot if any gradient holds a
    non-finite value (no partial update is applied in that case).
    """
    trainable = [s for s in slots if s.trainable]
    for s in trainable:
        if s.grad is None:
            raise ConfigError(f"gradient not populated for slot '{s.name}'")
        if not np.isfinite(s.grad).all():
            raise NumericError(f"non-finite gradient in slot '{s.name}'")

    t = cfg.step_count + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for s in trainable:
        if s.adam_m is None:
            s.adam_m = np.zeros_like(s.value)
            s.adam_v = np.zeros_like(s.value)
        g = s.grad
        s.adam_m *= cfg.beta1
        s.adam_m += (1.0 - cfg.beta1) * g
        s.adam_v *= cfg.beta2
        s.adam_v += (1.0 - cfg.beta2) * (g * g)
        m_hat = s.adam_m / bc1
        v_hat = s.adam_v / bc2
        s.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        g[...] = 0.0
    cfg.step_count = t


def clip_global_norm(slots: Iterable[ParamSlot], max_norm: float) -> float:
    """Scale all trainable gradients so their joint l2 norm is <= max_norm.

    Returns the pre-clip norm. Off by default in training configs.
    """
    grads = [s.grad for s in slots if s.trainable and s.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# affine


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise x @ w + b for x of shape (B, I), w (I, O), b (O,)."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ConfigError("affine expects x:(B,I), w:(I,O), b:(O,)")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ConfigError(
            f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}"
        )
    return x @ w + b


def affine_backward(
    x: np.ndarray, w: np.ndarray, d_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_x, d_w, d_b) of affine for upstream gradient d_y."""
    return d_y @ w.T, x.T @ d_y, d_y.sum(axis=0)


# ---------------------------------------------------------------------------
# LSTM cell

# Gate columns of the fused weight matrices are ordered [input, forget,
# output, candidate]: sigmoids occupy the first 3H columns, tanh the last H.


@dataclass
class LSTMCellParams:
    wx: np.ndarray  # (I, 4H)
    wh: np.ndarray  # (H, 4H)
    b: np.ndarray  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.wh.shape[0]

    @property
    def input_size(self) -> int:
        return self.wx.shape[0]

    @classmethod
    def from_gates(cls, w, u, b) -> "LSTMCellParams":
        """Assemble fused parameters from per-gate dicts keyed by
        'input', 'forget', 'output', 'candidate'."""
        order = ("input", "forget", "output", "candidate")
        return cls(
            wx=np.concatenate([np.asarray(w[g]) for g in order], axis=1),
            wh=np.concatenate([np.asarray(u[g]) for g in order], axis=1),
            b=np.concatenate([np.asarray(b[g]) for g in order]),
        )

    def check(self) -> None:
        h = self.hidden_size
        if self.wx.shape[1] != 4 * h or self.wh.shape != (h, 4 * h) or self.b.shape != (4 * h,):
            raise ConfigError(
                f"LSTM parameter shapes inconsistent: wx{self.wx.shape} "
                f"wh{self.wh.shape} b{self.b.shape}"
            )


def lstm_cell(
    x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, p: LSTMCellParams
) -> tuple[np.ndarray, np.ndarray, tuple]:
    """One LSTM step for a (B, I) input slice.

    Returns (h, c, cache); the cache feeds lstm_cell_backward.
    """
    hs = p.hidden_size
    if x.ndim != 2 or x.shape[1] != p.input_size:
        raise ConfigError(f"lstm_cell input shape {x.shape} != (B,{p.input_size})")
    if h_prev.shape != (x.shape[0], hs) or c_prev.shape != h_prev.shape:
        raise ConfigError("lstm_cell state shapes do not match the batch or hidden size")
    z = x @ p.wx + h_prev @ p.wh + p.b
    gates = sigmoid(z[:, : 3 * hs])
    g = np.tanh(z[:, 3 * hs :])
    i = gates[:, :hs]
    f = gates[:, hs : 2 * hs]
    o = gates[:, 2 * hs : 3 * hs]
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, o, g, tc)


def lstm_cell_backward(
    cache: tuple, d_h: np.ndarray, d_c: np.ndarray, p: LSTMCellParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Exact backward of lstm_cell.

    d_h / d_c are the upstream gradients on this step's h and c. Returns
    (d_x, d_h_prev, d_c_prev, d_wx, d_wh, d_b).
    """
    x, h_prev, c_prev, i, f, o, g, tc = cache
    d_o = d_h * tc
    d_c_total = d_c + d_h * o * (1.0 - tc * tc)
    d_i = d_c_total * g
    d_g = d_c_total * i
    d_f = d_c_total * c_prev
    d_c_prev = d_c_total * f
    # through the gate nonlinearities
    d_z = np.concatenate(
        [
            d_i * i * (1.0 - i),
            d_f * f * (1.0 - f),
            d_o * o * (1.0 - o),
            d_g * (1.0 - g * g),
        ],
        axis=1,
    )
    d_x = d_z @ p.wx.T
    d_h_prev = d_z @ p.wh.T
    d_wx = x.T @ d_z
    d_wh = h_prev.T @ d_z
    d_b = d_z.sum(axis=0)
    return d_x, d_h_prev, d_c_prev, d_wx, d_wh, d_b


# ---------------------------------------------------------------------------
# dropout


def _scaled_mask(shape, rate: float, rng: np.random.Generator, dtype) -> np.ndarray:
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate)


def dropout_forward(
    x: np.ndarray, rate: float, rng: np.random.Generator
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Inverted dropout in training mode; returns (output, scaled mask).

    The mask is None when rate == 0 (no stream consumption). Backward is
    d_x = d_y * mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0,1), got {rate}")
    if rate == 0.0:
        return x, None
    mask = _scaled_mask(x.shape, rate, rng, x.dtype.type)
    return x * mask, mask


def dropout(
    x: np.ndarray, rate: float, rng: Optional[np.random.Generator], training: bool
) -> np.ndarray:
    """Inverted dropout: identity at inference, mask-and-rescale in training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0,1), got {rate}")
    if not training:
        return x
    out, _ = dropout_forward(x, rate, rng)
    return out


# ---------------------------------------------------------------------------
# squared distance


def squared_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of squared componentwise differences of two equal-length vectors."""
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError(f"squared_distance dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sum(d * d))


def squared_distance_grad(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(d/da, d/db) of squared_distance: 2(a-b) and -2(a-b)."""
    g = 2.0 * (a - b)
    return g, -g


# ---------------------------------------------------------------------------
# finite-difference gradient checking


class GradCheckResult(NamedTuple):
    max_rel_error: float
    slot: str
    analytic: float
    numeric: float


# Relative error floor: differences smaller than this magnitude are compared
# against the floor rather than the (possibly tiny) gradient itself, keeping
# finite-difference roundoff on near-zero gradients from dominating.
REL_ERROR_FLOOR = 1e-4


def finite_diff_check(
    forward: Callable[[], float],
    slots: Iterable[ParamSlot],
    h: float = 1e-4,
    rel_floor: float = REL_ERROR_FLOOR,
) -> GradCheckResult:
    """Compare populated analytic gradients against central differences.

    `forward` must be a deterministic closure over the slot values (run in
    float64 with dropout disabled or its mask frozen); it is evaluated twice
    up front and a NumericError is raised if the results differ. Every
    trainable scalar is then perturbed by +-h and
    (L(t+h) - L(t-h)) / (2h) is compared with the stored gradient. Returns
    the worst relative error together with the slot it occurred in.
    """
    first = float(forward())
    second = float(forward())
    if first != second:
        raise NumericError(
            f"forward closure is not deterministic ({first!r} != {second!r})"
        )

    worst = GradCheckResult(0.0, "", 0.0, 0.0)
    for slot in slots:
        if not slot.trainable:
            continue
        if slot.grad is None:
            raise ConfigError(f"analytic gradient missing for slot '{slot.name}'")
        value = slot.value
        grad = slot.grad
        for idx in range(value.size):
            orig = value.flat[idx]
            value.flat[idx] = orig + h
            lp = float(forward())
            value.flat[idx] = orig - h
            lm = float(forward())
            value.flat[idx] = orig
            numeric = (lp - lm) / (2.0 * h)
            analytic = float(grad.flat[idx])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), rel_floor)
            if err > worst.max_rel_error:
                worst = GradCheckResult(err, slot.name, analytic, numeric)
    return worst
