"""Dense float32 tensor operations with hand-written backward passes.

Tensors are plain C-contiguous ``np.float32`` arrays. Convolution inputs are
``(N, C, H, W)``; an unbatched ``(C, H, W)`` input is accepted and returned
unbatched. Every reduction that feeds training runs in a fixed order so the
same inputs give bit-identical outputs regardless of BLAS threading.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numba import njit

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a tensor."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what}: {bad} non-finite element(s)")
    return x


@njit(cache=True)
def _matmul_kernel(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        # accumulate strictly left to right over k for every (i, j)
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=DTYPE)
    _matmul_kernel(a, b, out)
    return check_finite(out, "matmul")


def matmul_backward(a: np.ndarray, b: np.ndarray, grad_out: np.ndarray):
    """Gradients of ``a @ b`` with respect to ``a`` and ``b``."""
    grad_a = matmul(grad_out, np.ascontiguousarray(b.T))
    grad_b = matmul(np.ascontiguousarray(a.T), grad_out)
    return grad_a, grad_b


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    out = matmul(x, w)
    if b is not None:
        out += b
    return out


def dense_backward(x, w, grad_out):
    """Returns ``(grad_x, grad_w, grad_b)`` for ``x @ w + b``."""
    grad_x, grad_w = matmul_backward(x, w, grad_out)
    return grad_x, grad_w, grad_out.sum(axis=0, dtype=DTYPE)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ValueError(
            f"non-integral conv output: size={size} kernel={kernel} "
            f"stride={stride} padding={padding}")
    return span // stride + 1


def _batched(x):
    x = as_tensor(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")
    return x, False


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(x, kh, kw, stride, padding):
    """Strided patches as ``(N, C, oh, ow, kh, kw)``."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    xp = _pad(x, padding)
    win = np.empty((n, c, oh, ow, kh, kw), dtype=DTYPE)
    for ky in range(kh):
        for kx in range(kw):
            win[..., ky, kx] = xp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
    return win


def _fold(grad_win, in_shape, stride, padding):
    """Adjoint of ``_windows``: scatter-add patch gradients back onto the input."""
    n, c, h, w = in_shape
    _, _, oh, ow, kh, kw = grad_win.shape
    gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for ky in range(kh):
        for kx in range(kw):
            gp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += grad_win[..., ky, kx]
    if padding:
        gp = gp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gp)


def _im2col(x, kh, kw, stride, padding):
    win = _windows(x, kh, kw, stride, padding)
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), (n, oh, ow)


def conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding, no bias."""
    x, squeeze = _batched(x)
    kernels = as_tensor(kernels)
    c_out, c_in, kh, kw = kernels.shape
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, kernels {c_in}")
    cols, (n, oh, ow) = _im2col(x, kh, kw, stride, padding)
    out = matmul(cols, np.ascontiguousarray(kernels.reshape(c_out, -1).T))
    out = np.ascontiguousarray(out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2))
    return out[0] if squeeze else out


def conv2d_backward(x, kernels, grad_out, stride: int = 1, padding: int = 0):
    """Returns ``(grad_x, grad_kernels)``."""
    x, squeeze = _batched(x)
    grad_out, _ = _batched(grad_out)
    kernels = as_tensor(kernels)
    c_out, c_in, kh, kw = kernels.shape
    cols, (n, oh, ow) = _im2col(x, kh, kw, stride, padding)
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, c_out))
    w_flat = np.ascontiguousarray(kernels.reshape(c_out, -1))
    grad_w = matmul(np.ascontiguousarray(g.T), cols).reshape(kernels.shape)
    grad_cols = matmul(g, w_flat).reshape(n, oh, ow, c_in, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    grad_x = _fold(grad_cols, x.shape, stride, padding)
    return (grad_x[0] if squeeze else grad_x), grad_w


def depthwise_conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Per-channel cross-correlation: channel ``c`` meets only ``kernels[c]``."""
    x, squeeze = _batched(x)
    kernels = as_tensor(kernels)
    c, kh, kw = kernels.shape
    if x.shape[1] != c:
        raise ValueError(f"depthwise channel mismatch: input {x.shape[1]}, kernels {c}")
    win = _windows(x, kh, kw, stride, padding)
    out = np.zeros(win.shape[:4], dtype=DTYPE)
    for ky in range(kh):
        for kx in range(kw):
            out += win[..., ky, kx] * kernels[None, :, ky, kx, None, None]
    check_finite(out, "depthwise_conv2d")
    return out[0] if squeeze else out


def depthwise_backward(x, kernels, grad_out, stride: int = 1, padding: int = 0):
    """Returns ``(grad_x, grad_kernels)``."""
    x, squeeze = _batched(x)
    grad_out, _ = _batched(grad_out)
    kernels = as_tensor(kernels)
    c, kh, kw = kernels.shape
    win = _windows(x, kh, kw, stride, padding)
    grad_w = np.empty_like(kernels)
    grad_win = np.empty_like(win)
    for ky in range(kh):
        for kx in range(kw):
            grad_w[:, ky, kx] = (win[..., ky, kx] * grad_out).sum(axis=(0, 2, 3), dtype=DTYPE)
            grad_win[..., ky, kx] = grad_out * kernels[None, :, ky, kx, None, None]
    grad_x = _fold(grad_win, x.shape, stride, padding)
    return (grad_x[0] if squeeze else grad_x), grad_w


def add_channel_bias(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x + b.reshape((1, -1) + (1,) * (x.ndim - 2))


def channel_bias_backward(grad_out: np.ndarray) -> np.ndarray:
    axes = (0,) + tuple(range(2, grad_out.ndim))
    return grad_out.sum(axis=axes, dtype=DTYPE)


def relu(x: np.ndarray) -> np.ndarray:
    return check_finite(np.maximum(as_tensor(x), DTYPE(0)), "relu")


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Passes the upstream gradient only where the ReLU input was positive."""
    return np.where(x > 0, grad_out, DTYPE(0)).astype(DTYPE)


def add_backward(grad_out: np.ndarray):
    return grad_out, grad_out


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), dtype=DTYPE)


def global_avg_pool_backward(in_shape, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = in_shape
    g = grad_out / DTYPE(h * w)
    return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None], in_shape), dtype=DTYPE)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p = z - log_norm[:, None]
    loss = float(-log_p[np.arange(n), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(DTYPE)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Perturbations are applied in float64 so the oracle adds no rounding of its own.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(x))
        flat[i] = orig - h
        lo = float(f(x))
        flat[i] = orig
        g[i] = (hi - lo) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
