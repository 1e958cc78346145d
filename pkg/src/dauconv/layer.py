"""Convolution layer built from displaced Gaussian aggregation units.

Each filter is a mixture of K units; a unit has a weight, a sub-pixel 2-D
displacement, and an aggregation perimeter sigma. Two execution paths:

* general path: rasterize the mixture onto a dense canvas and run an ordinary
  convolution. Supports per-unit (learnable) sigma. Backward differentiates
  the rasterization exactly.
* efficient path: blur every input channel once with the shared-sigma kernel,
  then gather blurred samples at per-unit displacements through a bilinear
  stencil. Requires one shared sigma per layer. The displacement gradient is
  the smooth derivative-of-Gaussian surrogate; the exact piecewise-bilinear
  gradient is available behind a flag for gradient checking.

Displacements are clamped to [-max_displacement, +max_displacement] per
component; forward passes reject violations instead of clamping silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp

from .gaussian import (ParameterError, gaussian_deriv_kernels, gaussian_kernel,
                       window_radius)
from .tensor_ops import DimensionError, conv2d, conv2d_grads, relu

MIN_LEARNABLE_SIGMA = 0.05


class ContractError(RuntimeError):
    """A cache or shape handed to backward does not match its forward pass."""


class ConfigurationError(ValueError):
    """Layer configuration is internally inconsistent."""


@dataclass
class DAUConfig:
    in_channels: int
    out_channels: int
    units_per_filter: int
    sigma: float = 0.5
    max_displacement: float = 4.0
    mode: str = "efficient"            # "efficient" | "general"
    sigma_learnable: bool = False

    def __post_init__(self):
        if self.units_per_filter < 1:
            raise ConfigurationError("units_per_filter must be >= 1")
        if self.sigma <= 0:
            raise ConfigurationError("sigma must be positive")
        if self.max_displacement <= 0:
            raise ConfigurationError("max_displacement must be positive")
        if self.mode not in ("efficient", "general"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "efficient" and self.sigma_learnable:
            raise ConfigurationError("efficient mode requires a fixed shared sigma")
        if self.sigma_learnable and self.sigma < MIN_LEARNABLE_SIGMA:
            raise ConfigurationError(
                f"learnable sigma must start at >= {MIN_LEARNABLE_SIGMA}")


@dataclass
class DAUParams:
    """Learnable state of one layer: weights w, displacements mu, sigma, bias.

    Shapes: w (F, S, K); mu (F, S, K, 2) as (dy, dx) in pixels; sigma is a
    scalar (shared) or an (F, S, K) array (per-unit, general mode); bias (F,).
    `active` flags units that survive pruning; inactive units contribute
    nothing to any forward or backward pass.
    """
    w: np.ndarray
    mu: np.ndarray
    sigma: object
    bias: np.ndarray
    active: np.ndarray = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if not np.isscalar(self.sigma):
            self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.active is None:
            self.active = np.ones(self.w.shape, dtype=bool)
        f, s, k = self.w.shape
        if self.mu.shape != (f, s, k, 2):
            raise DimensionError(f"mu shape {self.mu.shape} != {(f, s, k, 2)}")
        if self.bias.shape != (f,):
            raise DimensionError(f"bias shape {self.bias.shape} != ({f},)")

    @property
    def shape(self):
        return self.w.shape

    def sigma_array(self):
        if np.isscalar(self.sigma):
            return np.full(self.w.shape, float(self.sigma))
        return self.sigma

    def shared_sigma(self):
        if np.isscalar(self.sigma):
            return float(self.sigma)
        vals = np.unique(self.sigma)
        if vals.size != 1:
            raise ConfigurationError("this operation requires one shared sigma per layer")
        return float(vals[0])

    def copy(self):
        sig = self.sigma if np.isscalar(self.sigma) else self.sigma.copy()
        return DAUParams(self.w.copy(), self.mu.copy(), sig,
                         self.bias.copy(), self.active.copy())

    def validate(self, cfg):
        if self.w.shape != (cfg.out_channels, cfg.in_channels, cfg.units_per_filter):
            raise DimensionError(
                f"params shape {self.w.shape} does not match config "
                f"({cfg.out_channels}, {cfg.in_channels}, {cfg.units_per_filter})")
        if np.any(self.sigma_array() <= 0):
            raise ParameterError("sigma must be positive everywhere")
        if np.abs(self.mu).max(initial=0.0) > cfg.max_displacement:
            raise ParameterError(
                f"displacement exceeds the +/-{cfg.max_displacement} px clamp")


@dataclass
class BilinearStencil:
    """Integer base offset plus the four interpolation weights for one unit.

    weights[i][j] = ((1-i) + (2i-1)*fy) * ((1-j) + (2j-1)*fx) with (fy, fx)
    the fractional part of the displacement; they are non-negative and sum to 1.
    An exactly integer displacement yields a one-hot stencil at weights[0][0].
    """
    base: tuple
    weights: np.ndarray


def bilinear_stencil(mu):
    b = np.floor(np.asarray(mu, dtype=np.float64))
    fy, fx = np.asarray(mu, dtype=np.float64) - b
    wy = np.array([1.0 - fy, fy])
    wx = np.array([1.0 - fx, fx])
    return BilinearStencil((int(b[0]), int(b[1])), wy[:, None] * wx[None, :])


def clamp_displacements(params, max_displacement):
    """Clip every displacement component to [-max_displacement, +max_displacement].

    Returns the input object untouched when nothing is out of range.
    """
    if np.abs(params.mu).max(initial=0.0) <= max_displacement:
        return params
    return replace(params, mu=np.clip(params.mu, -max_displacement, max_displacement))


def canvas_radius(cfg, params=None):
    sigma_max = cfg.sigma
    if params is not None and not np.isscalar(params.sigma):
        sigma_max = float(np.max(params.sigma))
    return int(np.ceil(cfg.max_displacement)) + int(np.ceil(3.0 * sigma_max))


def init_dau_params(cfg, rng, mu_init="uniform"):
    """Fresh parameters: Glorot-uniform weights with fan counts S*K / F*K,
    displacements uniform on [-1.5, 1.5] per component, zero bias."""
    f, s, k = cfg.out_channels, cfg.in_channels, cfg.units_per_filter
    limit = np.sqrt(6.0 / (s * k + f * k))
    w = rng.uniform(-limit, limit, size=(f, s, k))
    if mu_init == "uniform":
        mu = rng.uniform(-1.5, 1.5, size=(f, s, k, 2))
    elif mu_init == "zero":
        mu = np.zeros((f, s, k, 2))
    else:
        raise ConfigurationError(f"unknown mu_init {mu_init!r}")
    if cfg.sigma_learnable:
        sigma = np.full((f, s, k), float(cfg.sigma))
    else:
        sigma = float(cfg.sigma)
    return DAUParams(w, mu, sigma, np.zeros(f))


# ---------------------------------------------------------------------------
# general path: dense rasterization
# ---------------------------------------------------------------------------

def _unit_grid_batch(radius, mu, sigma, with_grads=False):
    """Vectorized displaced_unit(_grads) over a batch of units.

    mu (U, 2), sigma (U,); returns arrays (U, side, side).
    """
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    uy = t[None, :, None] + mu[:, 0, None, None]
    ux = t[None, None, :] + mu[:, 1, None, None]
    s2 = (sigma * sigma)[:, None, None]
    g = np.exp(-(uy * uy + ux * ux) / (2.0 * s2))
    n = g.sum(axis=(1, 2), keepdims=True)
    unit = g / n
    if not with_grads:
        return unit
    dg_dy = -g * uy / s2
    dg_dx = -g * ux / s2
    dg_ds = g * (uy * uy + ux * ux) / (s2 * sigma[:, None, None])
    d_dy = (dg_dy * n - g * dg_dy.sum(axis=(1, 2), keepdims=True)) / (n * n)
    d_dx = (dg_dx * n - g * dg_dx.sum(axis=(1, 2), keepdims=True)) / (n * n)
    d_ds = (dg_ds * n - g * dg_ds.sum(axis=(1, 2), keepdims=True)) / (n * n)
    return unit, d_dy, d_dx, d_ds


def rasterize_analytic(params, cfg):
    """Dense per-(f, s) kernels on the full canvas, one Gaussian per unit,
    each normalized by its own sum over the canvas."""
    params.validate(cfg)
    radius = canvas_radius(cfg, params)
    side = 2 * radius + 1
    f, s, k = params.shape
    out = np.zeros((f, s, side, side))
    fu, su, ku = np.nonzero(params.active)
    if fu.size:
        grids = _unit_grid_batch(radius, params.mu[fu, su, ku],
                                 params.sigma_array()[fu, su, ku])
        np.add.at(out, (fu, su), params.w[fu, su, ku, None, None] * grids)
    return out


def rasterize_reference(params, cfg):
    """Shared-sigma kernels assembled exactly as the efficient path computes:
    the centered blur kernel copied to the four stencil offsets of every unit.

    Convolving with these kernels reproduces the efficient path bit-for-bit up
    to summation order, which makes this the equivalence oracle against it.
    """
    params.validate(cfg)
    sigma = params.shared_sigma()
    r = window_radius(sigma)
    radius = canvas_radius(cfg, params)
    g = gaussian_kernel(sigma)
    f, s, k = params.shape
    side = 2 * radius + 1
    out = np.zeros((f, s, side, side))
    fu, su, ku = np.nonzero(params.active)
    for f_i, s_i, k_i in zip(fu, su, ku):
        st = bilinear_stencil(params.mu[f_i, s_i, k_i])
        wu = params.w[f_i, s_i, k_i]
        for i in (0, 1):
            for j in (0, 1):
                a = st.weights[i, j]
                if a == 0.0:
                    continue
                oy, ox = st.base[0] + i, st.base[1] + j
                if max(abs(oy), abs(ox)) + r > radius:
                    raise ConfigurationError(
                        "displacement plus blur support exceeds the canvas")
                out[f_i, s_i,
                    radius - oy - r:radius - oy + r + 1,
                    radius - ox - r:radius - ox + r + 1] += wu * a * g
    return out


def forward_naive(x, params, cfg, rasterizer="analytic"):
    """Rasterize-and-convolve forward. Returns (relu(z), z)."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"input shape {x.shape} does not provide {cfg.in_channels} channels")
    if rasterizer == "analytic":
        kernels = rasterize_analytic(params, cfg)
    elif rasterizer == "reference":
        kernels = rasterize_reference(params, cfg)
    else:
        raise ConfigurationError(f"unknown rasterizer {rasterizer!r}")
    z = conv2d(x, kernels, params.bias.astype(x.dtype))
    return relu(z), z


def backward_naive(x, z, grad_output, params, cfg):
    """Exact gradients of the rasterized forward.

    Returns (grad_input, grad_w, grad_mu, grad_sigma, grad_bias). grad_output
    is the loss gradient w.r.t. the pre-activation z. grad_input comes from
    convolving with the 180-degree rotated kernels; the unit gradients project
    the kernel gradient onto each unit's derivative grids.
    """
    x = np.asarray(x)
    grad_output = np.asarray(grad_output)
    if z is not None and grad_output.shape != np.shape(z):
        raise ContractError(
            f"grad_output shape {grad_output.shape} != pre-activation {np.shape(z)}")
    kernels = rasterize_analytic(params, cfg)
    grad_x, grad_k, grad_b = conv2d_grads(x, kernels, grad_output)

    f, s, k = params.shape
    grad_w = np.zeros((f, s, k))
    grad_mu = np.zeros((f, s, k, 2))
    grad_sigma = np.zeros((f, s, k))
    fu, su, ku = np.nonzero(params.active)
    if fu.size:
        radius = canvas_radius(cfg, params)
        unit, d_dy, d_dx, d_ds = _unit_grid_batch(
            radius, params.mu[fu, su, ku], params.sigma_array()[fu, su, ku],
            with_grads=True)
        gk = grad_k[fu, su]                      # (U, side, side)
        wu = params.w[fu, su, ku]
        grad_w[fu, su, ku] = np.einsum("uij,uij->u", gk, unit)
        grad_mu[fu, su, ku, 0] = wu * np.einsum("uij,uij->u", gk, d_dy)
        grad_mu[fu, su, ku, 1] = wu * np.einsum("uij,uij->u", gk, d_dx)
        grad_sigma[fu, su, ku] = wu * np.einsum("uij,uij->u", gk, d_ds)
    return grad_x, grad_w, grad_mu, grad_sigma, grad_b


# ---------------------------------------------------------------------------
# efficient path: blur once, gather through bilinear stencils
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Everything backward_efficient needs from the matching forward call."""
    x: np.ndarray
    blurred: np.ndarray          # (N, S, H+2P, W+2P), blur of the zero-padded input
    stacked: np.ndarray          # (T*S, N*H*W) shifted rows of `blurred`
    z: np.ndarray
    pad: int
    taps: dict                   # flattened stencil tap table
    param_shape: tuple
    deriv_stacked: dict = field(default_factory=dict)


def _blur_extended(x, kernel, pad):
    """Depthwise cross-correlation evaluated on a grid extended by `pad` on
    each side, equivalent to blurring the zero-padded input everywhere the
    result can be nonzero."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(xp)
    ndi.correlate(xp, kernel[None, None].astype(x.dtype, copy=False),
                  output=out, mode="constant")
    return out


def _tap_table(params, cfg):
    """Flatten the active units' bilinear stencils into parallel tap arrays.

    Taps with zero interpolation weight are kept (they carry the derivative of
    the stencil weights) but flagged, so value paths can skip them.
    """
    f, s, k = params.shape
    fu, su, ku = np.nonzero(params.active)
    mu = params.mu[fu, su, ku]                   # (U, 2)
    if np.abs(mu).max(initial=0.0) > cfg.max_displacement:
        raise ParameterError(
            f"displacement exceeds the +/-{cfg.max_displacement} px clamp; "
            "clamp before calling forward")
    base = np.floor(mu).astype(np.int64)
    fr = mu - base
    fy, fx = fr[:, 0], fr[:, 1]
    wy = np.stack([1.0 - fy, fy])                # (2, U)
    wx = np.stack([1.0 - fx, fx])
    u = fu.size
    # tap order (i, j) in {0,1}^2 row-major
    a = np.empty((u, 4))
    da_dy = np.empty((u, 4))
    da_dx = np.empty((u, 4))
    oy = np.empty((u, 4), dtype=np.int64)
    ox = np.empty((u, 4), dtype=np.int64)
    for t, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        a[:, t] = wy[i] * wx[j]
        da_dy[:, t] = (2 * i - 1) * wx[j]
        da_dx[:, t] = wy[i] * (2 * j - 1)
        oy[:, t] = base[:, 0] + i
        ox[:, t] = base[:, 1] + j
    pad = int(np.ceil(cfg.max_displacement)) + 1
    key = (oy + pad) * (2 * pad + 1) + (ox + pad)
    shift_keys, tid = np.unique(key, return_inverse=True)
    tid = tid.reshape(u, 4)
    shifts = np.stack([shift_keys // (2 * pad + 1) - pad,
                       shift_keys % (2 * pad + 1) - pad], axis=1)
    return {
        "f": fu, "s": su, "k": ku,
        "unit_flat": (fu * s + su) * k + ku,
        "w": params.w[fu, su, ku],
        "a": a, "da_dy": da_dy, "da_dx": da_dx, "tid": tid,
        "shifts": shifts, "pad": pad,
    }


def _stack_shifted(field_ext, shifts, pad, sign, h, w):
    """Rows of shifted views of an extended field, flattened for the sparse
    matmul: out[t*C + c] = field_ext[:, c, sign-shifted window t]."""
    n, c = field_ext.shape[:2]
    t = shifts.shape[0]
    swapped = np.ascontiguousarray(field_ext.transpose(1, 0, 2, 3))
    out = np.empty((t, c, n, h, w), dtype=field_ext.dtype)
    for idx in range(t):
        oy, ox = (sign * shifts[idx]).tolist()
        out[idx] = swapped[:, :, pad + oy:pad + oy + h, pad + ox:pad + ox + w]
    return out.reshape(t * c, n * h * w)


def _gather_matrix(rows, cols, data, shape, dtype):
    # csc: the product then streams the dense operand once per column while
    # the (small) output stays cache-resident, instead of re-reading dense
    # rows per nonzero as the csr kernel does
    m = sp.coo_matrix((data.astype(dtype, copy=False), (rows, cols)), shape=shape)
    return m.tocsc()


def forward_efficient(x, params, cfg):
    """Blur-and-shift forward. Returns (relu(z), cache).

    The blurred input is kept on a grid extended by ceil(max_displacement)+1
    on each side, so every stencil read is an in-range read of the blur of the
    zero-padded input; this makes the path equal to a single convolution with
    the reference-rasterized kernels, borders included.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"input shape {x.shape} does not provide {cfg.in_channels} channels")
    sigma = params.shared_sigma()
    taps = _tap_table(params, cfg)
    pad = taps["pad"]
    n, s, h, w = x.shape
    f = params.shape[0]
    blurred = _blur_extended(x, gaussian_kernel(sigma), pad)

    keep = taps["a"].ravel() > 0.0
    amp = (taps["w"][:, None] * taps["a"]).ravel()[keep]
    rows = np.repeat(taps["f"], 4)[keep]
    cols = taps["tid"].ravel()[keep] * s + np.repeat(taps["s"], 4)[keep]
    t = taps["shifts"].shape[0]
    gather = _gather_matrix(rows, cols, amp, (f, t * s), x.dtype)
    stacked = _stack_shifted(blurred, taps["shifts"], pad, -1, h, w)
    z = (gather @ stacked).reshape(f, n, h, w)
    z = np.ascontiguousarray(np.moveaxis(z, 0, 1))
    z += params.bias.astype(x.dtype)[None, :, None, None]
    cache = ForwardCache(x=x, blurred=blurred, stacked=stacked, z=z, pad=pad,
                         taps=taps, param_shape=params.shape)
    return relu(z), cache


def _lag_correlations(grad_output, stacked, n_shifts):
    """corr[t, f, s] = sum_{n,y,x} grad_output[n,f,y,x] * shifted_field[t][n,s,y,x],
    one matrix product against the pre-stacked shifted rows."""
    f = grad_output.shape[1]
    flat = np.ascontiguousarray(grad_output.transpose(1, 0, 2, 3)).reshape(f, -1)
    corr = stacked.astype(np.float64, copy=False) @ flat.astype(np.float64,
                                                                copy=False).T
    s = stacked.shape[0] // n_shifts
    return corr.reshape(n_shifts, s, f).transpose(0, 2, 1)


def backward_efficient(cache, grad_output, params, cfg, exact_mu_grad=False):
    """Gradients of the blur-and-shift forward.

    grad_output is the loss gradient w.r.t. the pre-activation z. Returns
    (grad_input, grad_w, grad_mu, grad_bias).

    The displacement gradient defaults to the smooth surrogate: the input is
    convolved with the derivative-of-Gaussian kernels and sampled through the
    same stencils. With exact_mu_grad=True it is instead the exact derivative
    of the bilinear interpolation, which is what finite differences of this
    path converge to away from integer displacements.
    """
    grad_output = np.asarray(grad_output)
    if grad_output.shape != cache.z.shape:
        raise ContractError(
            f"grad_output shape {grad_output.shape} != forward z {cache.z.shape}")
    if params.shape != cache.param_shape:
        raise ContractError("params do not match the cached forward pass")
    taps = cache.taps
    pad = cache.pad
    n, s, h, w = cache.x.shape
    f, _, k = params.shape
    sigma = params.shared_sigma()

    grad_bias = grad_output.sum(axis=(0, 2, 3)).astype(np.float64)
    n_shifts = taps["shifts"].shape[0]

    def tap_view(corr):
        return corr[taps["tid"], taps["f"][:, None], taps["s"][:, None]]  # (U, 4)

    # lag correlations against the blurred input serve both grad_w and the
    # exact displacement gradient; the stacked rows are reused from forward
    tap_corr = tap_view(_lag_correlations(grad_output, cache.stacked, n_shifts))

    grad_w = np.zeros(f * s * k)
    np.add.at(grad_w, taps["unit_flat"], np.sum(taps["a"] * tap_corr, axis=1))
    grad_w = grad_w.reshape(f, s, k)

    grad_mu = np.zeros((f * s * k, 2))
    if exact_mu_grad:
        gy = np.sum(taps["da_dy"] * tap_corr, axis=1)
        gx = np.sum(taps["da_dx"] * tap_corr, axis=1)
    else:
        if not cache.deriv_stacked:
            d_y, d_x, _ = gaussian_deriv_kernels(sigma)
            for key, kern in (("y", d_y), ("x", d_x)):
                ext = _blur_extended(cache.x, kern, pad)
                cache.deriv_stacked[key] = _stack_shifted(
                    ext, taps["shifts"], pad, -1, h, w)
        gy = np.sum(taps["a"] * tap_view(_lag_correlations(
            grad_output, cache.deriv_stacked["y"], n_shifts)), axis=1)
        gx = np.sum(taps["a"] * tap_view(_lag_correlations(
            grad_output, cache.deriv_stacked["x"], n_shifts)), axis=1)
    np.add.at(grad_mu[:, 0], taps["unit_flat"], taps["w"] * gy)
    np.add.at(grad_mu[:, 1], taps["unit_flat"], taps["w"] * gx)
    grad_mu = grad_mu.reshape(f, s, k, 2)

    # input gradient: blur the output error once, then gather with negated
    # displacements (the Gaussian is symmetric, only the shifts rotate)
    err_blurred = _blur_extended(grad_output, gaussian_kernel(sigma), pad)
    keep = taps["a"].ravel() > 0.0
    amp = (taps["w"][:, None] * taps["a"]).ravel()[keep]
    rows = np.repeat(taps["s"], 4)[keep]
    cols = taps["tid"].ravel()[keep] * f + np.repeat(taps["f"], 4)[keep]
    scatter = _gather_matrix(rows, cols, amp, (s, n_shifts * f), cache.x.dtype)
    stacked = _stack_shifted(err_blurred, taps["shifts"], pad, +1, h, w)
    grad_x = (scatter @ stacked).reshape(s, n, h, w)
    grad_x = np.ascontiguousarray(np.moveaxis(grad_x, 0, 1))
    return grad_x, grad_w, grad_mu, grad_bias
