"""Dense float64 primitives.

Matrices are plain 2-D ``np.ndarray`` objects. In reference mode (the default)
every reduction runs in a fixed, sequential order so results are bit-identical
to a naive scalar loop and reproducible across machines; BLAS is never used.
``fast_mode()`` switches ``matmul`` to ``np.matmul`` for exploratory runs.
"""
from __future__ import annotations

import contextlib
import contextvars

import numpy as np

from .errors import ShapeError

_FAST = contextvars.ContextVar("barber_fast_mode", default=False)


@contextlib.contextmanager
def fast_mode(enabled: bool = True):
    token = _FAST.set(enabled)
    try:
        yield
    finally:
        _FAST.reset(token)


def is_reference_mode() -> bool:
    return not _FAST.get()


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    if _FAST.get():
        return a @ b
    # ascending inner index, one rounded multiply and one rounded add per step
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def seq_sum(v: np.ndarray, axis=None) -> np.ndarray | float:
    """Left-to-right sum (np.sum is pairwise, so its order differs from a loop)."""
    v = np.asarray(v, dtype=np.float64)
    if axis is None:
        v = v.ravel()
        return float(np.add.accumulate(v)[-1]) if v.size else 0.0
    if v.shape[axis] == 0:
        return np.zeros(np.delete(v.shape, axis))
    return np.take(np.add.accumulate(v, axis=axis), -1, axis=axis)


def frobenius_sq(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return seq_sum(a * a)


def row_l2_norms(x) -> np.ndarray:
    x = as_matrix(x, "x")
    return np.sqrt(seq_sum(x * x, axis=1))


def softmax_rows(a) -> np.ndarray:
    """Row softmax. Entries equal to -inf get probability 0 (used for causal masking)."""
    a = as_matrix(a)
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / seq_sum(e, axis=1)[:, None]


def sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def silu(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a * sigmoid(a)


def silu_grad(a) -> np.ndarray:
    s = sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> np.ndarray:
    # tanh approximation
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a**3)))


def gelu_grad(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    inner = _GELU_C * (a + 0.044715 * a**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)


ACTIVATIONS = {"silu": (silu, silu_grad), "gelu": (gelu, gelu_grad)}

RMS_EPS = 1e-6


def rmsnorm_rows(a, gain, eps: float = RMS_EPS) -> np.ndarray:
    """Normalize each row by its root-mean-square, then scale columns by ``gain``."""
    a = as_matrix(a)
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape != (a.shape[1],):
        raise ShapeError(f"rmsnorm gain shape {gain.shape} vs row length {a.shape[1]}")
    ms = seq_sum(a * a, axis=1) / a.shape[1]
    return a / np.sqrt(ms + eps)[:, None] * gain
