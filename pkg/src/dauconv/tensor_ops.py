"""Dense NCHW tensor primitives: direct convolution, elementwise ops, reductions,
and the central-difference gradient oracle.

All arrays follow a single layout convention: 4-D (batch, channel, row, col),
row-major, float32 or float64. Convolution is stride-1 cross-correlation with
zero "same" padding, the usual deep-learning convention; output spatial size
equals input spatial size.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Shapes of the operands do not compose."""


class OracleError(RuntimeError):
    """The finite-difference oracle hit a non-finite loss evaluation."""


def require_nchw(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")
    return x


def require_odd_kernels(kernels):
    """Kernels are (F, S, Kh, Kw) with odd Kh, Kw so the anchor is the center cell."""
    kernels = np.asarray(kernels)
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be 4-D (F, S, Kh, Kw), got shape {kernels.shape}")
    kh, kw = kernels.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel sides must be odd, got {kh}x{kw}")
    return kernels


def conv2d(x, kernels, bias=None, threads=1):
    """Stride-1, zero-same-padding cross-correlation.

    out[n, f, y, x] = bias[f] + sum_{s, dy, dx} kernels[f, s, dy, dx]
                      * input[n, s, y + dy - ay, x + dx - ax]

    with (ay, ax) the kernel center and out-of-range input reads taken as zero.
    `threads > 1` partitions the batch across worker threads. Every batch
    element is then computed by an identical per-sample kernel, so the result
    is bitwise-independent of how the batch is split across threads.
    """
    x = require_nchw(x)
    kernels = require_odd_kernels(kernels)
    n, s, h, w = x.shape
    f, ks, kh, kw = kernels.shape
    if ks != s:
        raise DimensionError(f"kernels expect {ks} input channels, input has {s}")
    if bias is None:
        bias = np.zeros(f, dtype=x.dtype)
    bias = np.asarray(bias, dtype=x.dtype)
    if bias.shape != (f,):
        raise DimensionError(f"bias must have shape ({f},), got {bias.shape}")

    if threads > 1 and n > 1:
        out = np.empty((n, f, h, w), dtype=x.dtype)
        def run(i):
            out[i:i + 1] = _conv2d_batch(x[i:i + 1], kernels, bias)
        with ThreadPoolExecutor(max_workers=min(threads, n)) as pool:
            list(pool.map(run, range(n)))
        return out
    return _conv2d_batch(x, kernels, bias)


def _conv2d_batch(x, kernels, bias):
    n, s, h, w = x.shape
    f, _, kh, kw = kernels.shape
    ry, rx = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ry, ry), (rx, rx)))
    k = kernels.astype(x.dtype, copy=False)
    if k.dtype == np.float32:
        # Gaussian tails cast from double can land in the subnormal range,
        # where BLAS slows down by orders of magnitude; they are zero at
        # single precision anyway
        k = np.where(np.abs(k) < np.finfo(np.float32).tiny, np.float32(0), k)
    # windows[n, s, y, x, dy, dx] = xp[n, s, y + dy, x + dx]
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(np.moveaxis(out, 3, 1))
    out += bias[None, :, None, None]
    return out


def conv2d_grads(x, kernels, grad_out, with_bias=True):
    """Gradients of `conv2d` w.r.t. input, kernels and bias.

    grad_kernels[f, s, dy, dx] = sum_{n, y, x} grad_out[n, f, y, x]
                                 * xpad[n, s, y + dy, x + dx]
    grad_input = cross-correlation of grad_out with the 180-degree rotated
    kernels, channels transposed.
    """
    x = require_nchw(x)
    kernels = require_odd_kernels(kernels)
    grad_out = require_nchw(grad_out, "grad_out")
    n, s, h, w = x.shape
    f, _, kh, kw = kernels.shape
    if grad_out.shape != (n, f, h, w):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match output ({n}, {f}, {h}, {w})")
    ry, rx = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ry, ry), (rx, rx)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # (N, S, H, W, kh, kw) x (N, F, H, W) -> (F, S, kh, kw)
    grad_k = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))
    rot = kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = conv2d(grad_out, np.ascontiguousarray(rot))
    grad_b = grad_out.sum(axis=(0, 2, 3)) if with_bias else None
    return grad_x, grad_k, grad_b


def finite_diff(loss, params, h=1e-5):
    """Central-difference gradient of a scalar loss over a parameter vector.

    grad[j] = (loss(p + h e_j) - loss(p - h e_j)) / (2 h)

    Evaluations must stay finite; a NaN/Inf loss raises OracleError naming the
    offending coordinate. Use float64 parameters for meaningful results.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1:
        raise DimensionError("finite_diff expects a 1-D parameter vector")
    grad = np.zeros_like(params)
    for j in range(params.size):
        for sign in (1.0, -1.0):
            p = params.copy()
            p[j] += sign * h
            val = float(loss(p))
            if not np.isfinite(val):
                raise OracleError(
                    f"non-finite loss {val} at coordinate {j} (offset {sign * h:+g})")
            grad[j] += sign * val
        grad[j] /= 2.0 * h
    return grad


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad, pre):
    """Mask the gradient where the pre-activation was <= 0 (gradient at exactly 0 is 0)."""
    grad = np.asarray(grad)
    pre = np.asarray(pre)
    if grad.shape != pre.shape:
        raise DimensionError(f"grad shape {grad.shape} != pre-activation shape {pre.shape}")
    return np.where(pre > 0, grad, 0)


def add(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def scale(a, c):
    return np.asarray(a) * c


def tensor_sum(x):
    return float(np.sum(x))


def tensor_max(x):
    return float(np.max(x))


def tensor_argmax(x):
    """Flat index of the first maximum in row-major order."""
    return int(np.argmax(x))
