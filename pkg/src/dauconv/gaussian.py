"""Discretized Gaussian aggregation units.

A unit is a normalized Gaussian bump sampled on an odd square grid. The
normalizer is the sum over the discrete window (not the continuous integral),
so every kernel sums to exactly 1 and stays normalized under truncation.

Grid convention: index offsets run tau = idx - radius on each axis, and a unit
displaced by `d` places its mass at offset -d. Under the cross-correlation
convolution in `tensor_ops.conv2d` this translates image content by +d
(positive = down/right), which is the direction all layer-level code assumes.
"""

from __future__ import annotations

import numpy as np


class ParameterError(ValueError):
    """A numeric parameter is outside its valid domain."""


def window_radius(sigma):
    """Radius of the aggregation window; the kernel side is 2*ceil(3*sigma) + 1."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    return int(np.ceil(3.0 * sigma))


def _offsets(radius):
    return np.arange(-radius, radius + 1, dtype=np.float64)


def displaced_unit(radius, displacement, sigma):
    """Normalized unit displaced by (dy, dx), sampled on a (2r+1)^2 window.

    value(tau) = exp(-||tau + d||^2 / (2 sigma^2)) / N,  N = sum over the window.
    """
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    dy, dx = float(displacement[0]), float(displacement[1])
    t = _offsets(radius)
    g = np.exp(-((t + dy)[:, None] ** 2 + (t + dx)[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_kernel(sigma):
    """Centered blur kernel on the 2*ceil(3*sigma)+1 window; sums to exactly 1."""
    return displaced_unit(window_radius(sigma), (0.0, 0.0), sigma)


def displaced_unit_grads(radius, displacement, sigma):
    """Unit grid plus its exact derivatives w.r.t. displacement and sigma.

    Quotient rule through the window-sum normalizer, so d_sigma sums to zero
    and the displacement derivatives account for mass crossing the window edge.
    Returns (unit, d_dy, d_dx, d_sigma).
    """
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    dy, dx = float(displacement[0]), float(displacement[1])
    t = _offsets(radius)
    uy = (t + dy)[:, None] + np.zeros_like(t)[None, :]
    ux = np.zeros_like(t)[:, None] + (t + dx)[None, :]
    s2 = sigma * sigma
    g = np.exp(-(uy * uy + ux * ux) / (2.0 * s2))
    n = g.sum()

    dg_dy = -g * uy / s2
    dg_dx = -g * ux / s2
    dg_ds = g * (uy * uy + ux * ux) / (s2 * sigma)

    unit = g / n
    d_dy = (dg_dy * n - g * dg_dy.sum()) / (n * n)
    d_dx = (dg_dx * n - g * dg_dx.sum()) / (n * n)
    d_ds = (dg_ds * n - g * dg_ds.sum()) / (n * n)
    return unit, d_dy, d_dx, d_ds


def gaussian_deriv_kernels(sigma):
    """Derivative kernels of a centered unit on the blur window.

    Returns (d_mu_y, d_mu_x, d_sigma): the derivatives of the displaced,
    renormalized unit with respect to its displacement components and sigma,
    evaluated at zero displacement. The displacement kernels are antisymmetric
    along their axis; d_sigma sums to zero.
    """
    _, d_dy, d_dx, d_ds = displaced_unit_grads(window_radius(sigma), (0.0, 0.0), sigma)
    return d_dy, d_dx, d_ds
