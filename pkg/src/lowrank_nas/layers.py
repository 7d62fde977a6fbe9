"""Forward and backward kernels for the layer kinds of the tiny transformer.

Activations are float64 arrays shaped ``(batch, tokens, dim)`` (or ``(batch, dim)``
for pooled features and logits). Each ``*_fwd`` returns the output together with
whatever the matching ``*_bwd`` needs.

Forward kernels report their arithmetic to the active :class:`FlopCounter`, if
any. One multiply-accumulate is two FLOPs; element-wise work is charged at the
per-element constants below.
"""
from __future__ import annotations

import contextlib
import contextvars
import math

import numpy as np

from .errors import ShapeError

# Per-element FLOP charges for non-matmul work.
BIAS_FLOPS = 1  # one add
RESIDUAL_FLOPS = 1  # one add
LAYERNORM_FLOPS = 7  # mean, center, square, variance, normalize, scale, shift
GELU_FLOPS = 8  # cube, scale, add, scale, tanh, add, half, multiply
SOFTMAX_FLOPS = 4  # max subtract, exp, sum, divide
SCALE_FLOPS = 1  # attention score scaling
POOL_FLOPS = 1  # one add per pooled element

LN_EPS = 1e-8
GELU_C = math.sqrt(2.0 / math.pi)


class FlopCounter:
    """Tally of multiply-accumulates and element-wise FLOPs seen by forward kernels."""

    def __init__(self):
        self.macs = 0
        self.elementwise = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.elementwise


_counter: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "flop_counter", default=None
)


@contextlib.contextmanager
def count_flops():
    """Collect the cost of every forward kernel executed inside the block."""
    counter = FlopCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    counter = _counter.get()
    if counter is not None:
        batch = int(np.prod(np.broadcast_shapes(a.shape[:-2], b.shape[:-2]), dtype=np.int64))
        counter.macs += batch * a.shape[-2] * a.shape[-1] * b.shape[-1]
    return a @ b


def charge(n_elements: int, per_element: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.elementwise += int(n_elements) * per_element


def _rows(x: np.ndarray) -> np.ndarray:
    # Collapse leading dims so matmuls are counted as a single (rows x m) @ (m x n).
    return x.reshape(-1, x.shape[-1])


# ---------------------------------------------------------------- linear


def linear_fwd(x, W, b):
    """``y = x @ W + b`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: x{x.shape}, W{W.shape}, b{b.shape}")
    y = _mm(_rows(x), W) + b
    charge(y.size, BIAS_FLOPS)
    return y.reshape(*x.shape[:-1], W.shape[1])


def linear_bwd(x, W, dy):
    """Return ``(dx, dW, db)`` for :func:`linear_fwd`."""
    x2 = _rows(x)
    dy2 = _rows(dy)
    dW = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ W.T).reshape(x.shape)
    return dx, dW, db


def lowrank_linear_fwd(x, U, V, b):
    """``y = (x @ U) @ V.T + b`` without forming ``U @ V.T``.

    Returns ``(y, h)`` where ``h = x @ U`` is kept for the backward pass.
    """
    if x.shape[-1] != U.shape[0] or U.shape[1] != V.shape[1] or b.shape != (V.shape[0],):
        raise ShapeError(f"lowrank linear: x{x.shape}, U{U.shape}, V{V.shape}, b{b.shape}")
    if U.shape[1] < 1:
        raise ShapeError("lowrank linear needs rank >= 1")
    h = _mm(_rows(x), U)
    y = _mm(h, V.T) + b
    charge(y.size, BIAS_FLOPS)
    return y.reshape(*x.shape[:-1], V.shape[0]), h


def lowrank_linear_bwd(x, U, V, h, dy):
    """Return ``(dx, dU, dV, db)`` for :func:`lowrank_linear_fwd`."""
    x2 = _rows(x)
    dy2 = _rows(dy)
    dV = dy2.T @ h
    dh = dy2 @ V
    dU = x2.T @ dh
    db = dy2.sum(axis=0)
    dx = (dh @ U.T).reshape(x.shape)
    return dx, dU, dV, db


# ---------------------------------------------------------------- layernorm


def layernorm_fwd(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    charge(x.size, LAYERNORM_FLOPS)
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_bwd(cache, dy):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dgamma = _rows(dy * xhat).sum(axis=0)
    dbeta = _rows(dy).sum(axis=0)
    g = dy * gamma
    dx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True) / d)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- gelu


def gelu_fwd(x):
    """Tanh approximation of GELU."""
    charge(x.size, GELU_FLOPS)
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(GELU_C * x * (1.0 + 0.044715 * x2)))


def gelu_bwd(x, dy):
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
    dinner = GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# ---------------------------------------------------------------- softmax / attention


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _split_heads(x, heads):
    B, T, d = x.shape
    return x.reshape(B, T, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def attention_fwd(q, k, v, heads: int):
    """Multi-head scaled dot-product attention on projected ``q``, ``k``, ``v``."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"attention: q{q.shape}, k{k.shape}, v{v.shape}")
    if q.shape[-1] % heads:
        raise ShapeError(f"dim {q.shape[-1]} not divisible by {heads} heads")
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = _mm(qh, kh.transpose(0, 1, 3, 2)) * scale
    charge(scores.size, SCALE_FLOPS)
    probs = softmax(scores)
    charge(scores.size, SOFTMAX_FLOPS)
    ctx = _mm(probs, vh)
    return _merge_heads(ctx), (qh, kh, vh, probs, scale)


def attention_bwd(cache, dout):
    """Return ``(dq, dk, dv)``."""
    qh, kh, vh, probs, scale = cache
    heads = qh.shape[1]
    dctx = _split_heads(dout, heads)
    dprobs = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = probs.transpose(0, 1, 3, 2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    return _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)


# ---------------------------------------------------------------- losses


def cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns ``(loss, dlogits)``."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits{logits.shape}, labels{labels.shape}")
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    B = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / B


def kd_loss(student, teacher, temperature: float = 1.0):
    """``temperature**2 * KL(softmax(teacher/T) || softmax(student/T))`` averaged over the batch.

    Returns ``(loss, dstudent)``; the teacher is treated as a constant.
    """
    if student.shape != teacher.shape or student.ndim != 2:
        raise ShapeError(f"kd_loss: student{student.shape}, teacher{teacher.shape}")
    if student.shape[0] == 0:
        raise ValueError("empty batch")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    B = student.shape[0]
    zs = student / temperature
    zt = teacher / temperature
    zs = zs - zs.max(axis=1, keepdims=True)
    zt = zt - zt.max(axis=1, keepdims=True)
    log_ps = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    log_pt = zt - np.log(np.exp(zt).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt)
    kl = (pt * (log_pt - log_ps)).sum(axis=1).mean()
    grad = temperature * (np.exp(log_ps) - pt) / B
    return float(temperature**2 * kl), grad


def distill_loss(student, labels, teacher, temperature: float = 1.0):
    """Equal mix of hard-label cross-entropy and distillation against ``teacher`` logits."""
    ce, dce = cross_entropy(student, labels)
    kd, dkd = kd_loss(student, teacher, temperature)
    return 0.5 * ce + 0.5 * kd, 0.5 * dce + 0.5 * dkd
