"""Dense numeric primitives.

Matrices and 4-d tensors are plain ``numpy.float64`` arrays in C (row-major)
order. Everything here is a pure function of its inputs.

Randomness goes through :func:`make_rng`, which always builds numpy's PCG64
bit generator. PCG64 streams are specified bit-for-bit, so a seed produces the
same draws on every platform.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import solve_triangular

from .errors import NumericError, RankError, ShapeError

DEP_TOL = 1e-10


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(a) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite entries in input")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


class QRAppend(NamedTuple):
    q: np.ndarray | None
    coeffs: np.ndarray
    residual_norm: float


def qr_append(basis, v, dep_tol: float = DEP_TOL) -> QRAppend:
    """Orthogonalize ``v`` against the orthonormal columns of ``basis``.

    Classical Gram-Schmidt with one reorthogonalization pass. ``q`` is None
    when the residual norm falls below ``dep_tol * ||v||`` (``v`` is
    numerically in the span of ``basis``).
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    _check_finite(v)
    if basis is None or np.size(basis) == 0:
        coeffs = np.zeros(0)
        residual = v.copy()
    else:
        basis = np.asarray(basis, dtype=np.float64)
        if basis.ndim == 1:
            basis = basis[:, None]
        if basis.shape[0] != v.shape[0]:
            raise ShapeError(f"basis has {basis.shape[0]} rows, vector has length {v.shape[0]}")
        _check_finite(basis)
        coeffs = basis.T @ v
        residual = v - basis @ coeffs
        extra = basis.T @ residual
        residual -= basis @ extra
        coeffs = coeffs + extra
    rnorm = float(np.linalg.norm(residual))
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0 or rnorm < dep_tol * vnorm:
        return QRAppend(None, coeffs, rnorm)
    return QRAppend(residual / rnorm, coeffs, rnorm)


def least_squares(d, w, dep_tol: float = DEP_TOL) -> np.ndarray:
    """Solve ``min ||w - d @ c||_F`` for ``c`` with a Householder QR of ``d``."""
    d, w = as_matrix(d), as_matrix(w)
    if d.shape[0] != w.shape[0]:
        raise ShapeError(f"dictionary has {d.shape[0]} rows but target has {w.shape[0]}")
    _check_finite(d, w)
    q, r = np.linalg.qr(d, mode="reduced")
    col_norms = np.linalg.norm(d, axis=0)
    for i in range(d.shape[1]):
        if col_norms[i] == 0.0 or abs(r[i, i]) < dep_tol * col_norms[i]:
            raise RankError(i)
    return solve_triangular(r, q.T @ w, lower=False)


# ---------------------------------------------------------------------------
# tensor layout
# ---------------------------------------------------------------------------


def matricize(t: np.ndarray) -> np.ndarray:
    """(n0, n1, n2, n3) -> n0 x (n1*n2*n3), row-major."""
    t = np.ascontiguousarray(t, dtype=np.float64)
    return t.reshape(t.shape[0], -1)


def tensorize(m: np.ndarray, dims) -> np.ndarray:
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.size != int(np.prod(dims)):
        raise ShapeError(f"cannot reshape {m.shape} into {tuple(dims)}")
    return m.reshape(dims)


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d_forward(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``weight`` (M,C,kh,kw).

    Returns ``(out, cache)``; the cache feeds :func:`conv2d_backward`.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv input {x.shape} does not match filters {weight.shape}")
    m, c, kh, kw = weight.shape
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = cols @ weight.reshape(m, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(x.shape[0], ho, wo, m).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, weight, stride, padding)


def conv2d_backward(grad_out, cache):
    """Returns ``(grad_x, grad_weight, grad_bias)``."""
    x_shape, cols, weight, stride, padding = cache
    n, c, h, w = x_shape
    m, _, kh, kw = weight.shape
    ho, wo = grad_out.shape[2:]
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, m)
    grad_w = (g.T @ cols).reshape(weight.shape)
    grad_b = g.sum(axis=0)
    dcols = (g @ weight.reshape(m, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), grad_w, grad_b


def maxpool2d_forward(x, size=2, stride=None):
    stride = stride or size
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, arg, size, stride)


def maxpool2d_backward(grad_out, cache):
    x_shape, arg, size, stride = cache
    ho, wo = grad_out.shape[2:]
    dx = np.zeros(x_shape)
    for i in range(size):
        for j in range(size):
            hit = arg == i * size + j
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += grad_out * hit
    return dx


# ---------------------------------------------------------------------------
# normalization, dropout
# ---------------------------------------------------------------------------


def batchnorm_forward(x, gamma, beta, eps=1e-5, mean=None, var=None):
    """Per-channel normalization over (N, H, W).

    Batch statistics are used unless ``mean``/``var`` are given (eval mode).
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if mean is None:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv, gamma, axes, shape, mean, var)


def batchnorm_backward(grad_out, cache, batch_stats=True):
    xhat, inv, gamma, axes, shape, _, _ = cache
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    gxhat = grad_out * gamma.reshape(shape)
    if not batch_stats:
        return gxhat * inv.reshape(shape), grad_gamma, grad_beta
    count = grad_out.size // gamma.size
    dx = (
        inv.reshape(shape)
        / count
        * (
            count * gxhat
            - gxhat.sum(axis=axes).reshape(shape)
            - xhat * (gxhat * xhat).sum(axis=axes).reshape(shape)
        )
    )
    return dx, grad_gamma, grad_beta


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``rate``, else 1/(1-rate)."""
    if rate <= 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# activations and loss
# ---------------------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x, grad_out):
    return grad_out * (x > 0)


def leaky_relu(x, slope=0.01):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, grad_out, slope=0.01):
    return grad_out * np.where(x > 0, 1.0, slope)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    mx = logits.max(axis=-1, keepdims=True)
    return logits - mx - np.log(np.exp(logits - mx).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits, labels):
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)
