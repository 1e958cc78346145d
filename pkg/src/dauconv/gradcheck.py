"""Finite-difference verification suites for every analytic gradient.

Covers the six parameter groups: unit weights, displacements, sigma, bias,
the input gradient, and batch norm. The displacement row checks the exact
piecewise-bilinear gradient (the derivative finite differences of the
blur-and-shift path converge to away from integer displacements); the smooth
training surrogate is validated separately by the acceptance suite at its own
tolerance. Fault-injection flags scale one group's analytic gradient by 1.01
to prove the harness catches wrong gradients.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .layer import (DAUConfig, DAUParams, backward_efficient, backward_naive,
                    forward_efficient, forward_naive)
from .tensor_ops import finite_diff

GROUPS = ("dau_weight", "dau_mu", "dau_sigma", "bias", "input", "bn")
_FAULT = 1.01


def rel_error(analytic, numeric, floor_frac=1e-4):
    """Worst per-coordinate relative error.

    Coordinates more than 1/floor_frac below the group's largest magnitude are
    measured against that floor instead of their own size: differences there
    sit at the finite-difference noise level and say nothing about the
    analytic gradient, while any genuine percent-level fault on the
    significant coordinates still registers at full strength.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return float(np.abs(a - b).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor_frac * scale)
    return float((np.abs(a - b) / denom).max())


def _mid_cell_params(rng, f, s, k, sigma, span=3):
    w = rng.standard_normal((f, s, k))
    base = rng.integers(-span, span, size=(f, s, k, 2))
    frac = rng.uniform(0.15, 0.85, size=(f, s, k, 2))
    return DAUParams(w, base + frac, sigma, rng.standard_normal(f) * 0.1)


def run_gradcheck(inject=None, seed=5):
    """Run all suites in double precision. Returns rows of
    (group, worst_rel_error, tolerance, passed)."""
    if inject is not None and inject not in GROUPS:
        raise ValueError(f"unknown fault-injection group {inject!r}")
    rng = np.random.default_rng(seed)
    rows = []

    cfg = DAUConfig(2, 3, 2, sigma=0.5, max_displacement=4.0)
    p = _mid_cell_params(rng, 3, 2, 2, 0.5)
    x = rng.standard_normal((2, 2, 9, 9))
    _, cache = forward_efficient(x, p, cfg)
    q = rng.standard_normal(cache.z.shape)
    gx, gw, gmu, gb = backward_efficient(cache, q, p, cfg, exact_mu_grad=True)

    def loss_field(field, v):
        pp = p.copy()
        getattr(pp, field)[...] = v.reshape(getattr(pp, field).shape)
        _, c2 = forward_efficient(x, pp, cfg)
        return float(np.sum(q * c2.z))

    def fault(group, grad):
        return grad * _FAULT if inject == group else grad

    fd = finite_diff(lambda v: loss_field("w", v), p.w.ravel(), h=1e-5)
    rows.append(("dau_weight", rel_error(fault("dau_weight", gw).ravel(), fd), 1e-6))

    fd = finite_diff(lambda v: loss_field("mu", v), p.mu.ravel(), h=1e-5)
    rows.append(("dau_mu", rel_error(fault("dau_mu", gmu).ravel(), fd), 1e-6))

    fd = finite_diff(lambda v: loss_field("bias", v), p.bias.ravel(), h=1e-5)
    rows.append(("bias", rel_error(fault("bias", gb).ravel(), fd), 1e-6))

    def loss_input(v):
        _, c2 = forward_efficient(v.reshape(x.shape), p, cfg)
        return float(np.sum(q * c2.z))

    # the loss is linear in the input, so a larger step only cuts roundoff
    fd = finite_diff(loss_input, x.ravel(), h=1e-4)
    rows.append(("input", rel_error(fault("input", gx).ravel(), fd), 1e-6))

    # sigma runs on the dense general path where it is learnable
    gcfg = DAUConfig(2, 2, 2, sigma=0.6, max_displacement=3.0,
                     mode="general", sigma_learnable=True)
    gp = _mid_cell_params(rng, 2, 2, 2, 0.6, span=2)
    gp.sigma = np.full((2, 2, 2), 0.6) + rng.uniform(-0.1, 0.2, (2, 2, 2))
    gx2 = rng.standard_normal((2, 2, 8, 8))
    _, z = forward_naive(gx2, gp, gcfg)
    q2 = rng.standard_normal(z.shape)
    _, _, _, gsig, _ = backward_naive(gx2, z, q2, gp, gcfg)

    def loss_sigma(v):
        pp = gp.copy()
        pp.sigma[...] = v.reshape(pp.sigma.shape)
        _, z2 = forward_naive(gx2, pp, gcfg)
        return float(np.sum(q2 * z2))

    fd = finite_diff(loss_sigma, gp.sigma.ravel(), h=1e-5)
    rows.append(("dau_sigma", rel_error(fault("dau_sigma", gsig).ravel(), fd), 1e-5))

    # batch norm
    bx = rng.standard_normal((4, 3, 5, 5))
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3)
    rm, rv = np.zeros(3), np.ones(3)
    out, cache_bn, _, _ = nn.batchnorm_forward(bx, gamma, beta, rm, rv)
    qb = rng.standard_normal(out.shape)
    bgx, bgg, bgb = nn.batchnorm_backward(qb, cache_bn)

    def loss_bn(parts):
        g = parts[:3]
        b = parts[3:6]
        xs = parts[6:].reshape(bx.shape)
        o, _, _, _ = nn.batchnorm_forward(xs, g, b, rm, rv)
        return float(np.sum(qb * o))

    packed = np.concatenate([gamma, beta, bx.ravel()])
    fd = finite_diff(loss_bn, packed, h=1e-5)
    analytic = np.concatenate([bgg, bgb, bgx.ravel()])
    rows.append(("bn", rel_error(fault("bn", analytic), fd), 1e-6))

    return [{"group": g, "worst_rel_error": err, "tolerance": tol,
             "passed": err < tol} for g, err, tol in rows]


def render_report(rows):
    lines = [f"{'group':<12}{'worst rel err':>15}{'tolerance':>12}  status"]
    for row in rows:
        status = "ok" if row["passed"] else "FAIL"
        lines.append(f"{row['group']:<12}{row['worst_rel_error']:>15.3e}"
                     f"{row['tolerance']:>12.0e}  {status}")
    return "\n".join(lines)
