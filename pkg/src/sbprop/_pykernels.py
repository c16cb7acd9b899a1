"""NumPy implementations of the elementary kernels.

All functions take and return C-contiguous float64 ``ndarray``s.  This module
is the reference backend; ``sbprop._ckernels`` (optional, compiled) implements
the hot subset with identical semantics and is preferred at import time by
``sbprop.backend``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

INV_SQRT2 = 1.0 / np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def matmul(a: np.ndarray, b: np.ndarray, transpose_b: bool = False) -> np.ndarray:
    """Stacked matrix product over the last two axes.

    Leading (batch) axes of ``a`` and ``b`` must match exactly when both are
    present; a 2-D operand against a stacked one is broadcast along the stack.
    No other broadcasting is supported.
    """
    if transpose_b:
        b = np.swapaxes(b, -1, -2)
    return np.ascontiguousarray(np.matmul(a, b))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a + b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a * b


def scale(x: np.ndarray, c: float) -> np.ndarray:
    return x * c


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_vjp(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, dy, 0.0)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact-erf form: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    return 0.5 * x * (1.0 + erf(x * INV_SQRT2))


def gelu_vjp(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(p: np.ndarray, dy: np.ndarray) -> np.ndarray:
    inner = (dy * p).sum(axis=-1, keepdims=True)
    return p * (dy - inner)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    """Zero-mean/unit-variance over the last axis, then affine by gamma/beta."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return xhat * gamma + beta


def layer_norm_vjp(
    x: np.ndarray, gamma: np.ndarray, eps: float, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dgamma, dbeta); moments are recomputed from x."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd

    lead = tuple(range(x.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)

    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = rstd * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta
