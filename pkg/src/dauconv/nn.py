"""Baseline layers for assembling small networks: max-pooling, batch
normalization, fully-connected, and the softmax cross-entropy loss. Each
operation has a forward and a matching exact backward."""

from __future__ import annotations

import numpy as np

from .tensor_ops import DimensionError


class DataError(ValueError):
    """Labels or payload values outside their documented domain."""


class ContractError(RuntimeError):
    """Operation called outside its supported regime."""


def maxpool_forward(x, size=2, stride=2):
    """Window max over non-overlapping windows (size must equal stride).

    Odd trailing rows/columns are cropped. Returns (out, argmax) where argmax
    holds the flat within-window index of the first maximum in row-major scan
    order, which backward uses to route gradients deterministically.
    """
    if size != stride:
        raise ContractError("only size == stride pooling is supported")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"pooling a {h}x{w} map with window {size} leaves nothing")
    xc = x[:, :, :ho * size, :wo * size]
    windows = xc.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, ho, wo, size * size)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool_backward(grad_out, argmax, input_shape, size=2, stride=2):
    """Route each window's gradient to its recorded argmax position."""
    if size != stride:
        raise ContractError("only size == stride pooling is supported")
    n, c, h, w = input_shape
    ho, wo = grad_out.shape[2:]
    grad_in = np.zeros((n, c, h, w), dtype=grad_out.dtype)
    ni, ci, yi, xi = np.indices(grad_out.shape)
    yy = yi * size + argmax // size
    xx = xi * size + argmax % size
    grad_in[ni, ci, yy, xx] = grad_out
    return grad_in


def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      eps=1e-5, momentum=0.9, train=True):
    """Per-channel normalization over (batch, rows, cols).

    Train mode normalizes with batch statistics (biased variance) and returns
    updated running statistics; eval mode normalizes with the running ones.
    Returns (out, cache, running_mean, running_var).
    """
    n, c, h, w = x.shape
    if train:
        if n < 2:
            raise ContractError("train-mode batch norm needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_rm = momentum * running_mean + (1.0 - momentum) * mean
        new_rv = momentum * running_var + (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, gamma, inv_std, train)
    return out, cache, new_rm, new_rv


def batchnorm_backward(grad_out, cache):
    """Exact gradients; the train-mode input gradient includes the coupling
    through the batch mean and variance."""
    xhat, gamma, inv_std, train = cache
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gscaled = grad_out * gamma[None, :, None, None]
    if train:
        m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        mean_g = gscaled.mean(axis=(0, 2, 3))
        mean_gx = (gscaled * xhat).mean(axis=(0, 2, 3))
        grad_x = inv_std[None, :, None, None] * (
            gscaled - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None])
    else:
        grad_x = gscaled * inv_std[None, :, None, None]
    return grad_x, grad_gamma, grad_beta


def dense_forward(x, weight, bias):
    """x (N, D) @ weight (O, D)^T + bias (O,)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"dense expects (N, {weight.shape[1]}) input, got {x.shape}")
    return x @ weight.T + bias


def dense_backward(grad_out, x, weight):
    grad_x = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def softmax_xent(logits, labels):
    """Mean cross-entropy with max-subtracted softmax.

    Returns (loss, grad_logits, probs); grad_logits = (softmax - onehot) / N.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise DataError(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    picked = shifted[np.arange(n), labels] - np.log(expv.sum(axis=1))
    loss = float(-picked.mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad, probs
