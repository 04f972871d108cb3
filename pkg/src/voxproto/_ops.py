"""Small numeric kernels shared by the forward and backward passes."""

import numpy as np

PROB_CLAMP = 1e-12
NORM_EPS = 1e-6


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def row_norms(x):
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def safe_normalize(x, eps=NORM_EPS):
    """Row-wise ``x / max(||x||, eps)``. Returns (normalized, clipped norms)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.maximum(row_norms(x), eps)
    return x / norms[:, None], norms


def safe_normalize_backward(grad_out, unit, norms, eps=NORM_EPS):
    """Backward of :func:`safe_normalize` given its outputs."""
    active = norms > eps
    proj = np.einsum("ij,ij->i", unit, grad_out)
    grad = grad_out / norms[:, None]
    grad[active] -= unit[active] * (proj[active] / norms[active])[:, None]
    return grad


def cosine(a, b, eps=NORM_EPS):
    """Row-wise cosine similarity with eps-safe denominators."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    num = np.einsum("ij,ij->i", a, b)
    return num / (np.maximum(row_norms(a), eps) * np.maximum(row_norms(b), eps))
