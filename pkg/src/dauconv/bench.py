"""Wall-time benchmark of the blur-and-shift path against the dense
rasterize-and-convolve path and a plain convolution of the same footprint.

Every row carries the measured speed-up over the efficient path next to the
theoretical factor from the cost model, kernel_area / (4 * units).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .analysis import speedup_estimate
from .layer import (DAUConfig, DAUParams, backward_efficient, backward_naive,
                    canvas_radius, forward_efficient, forward_naive)
from .tensor_ops import conv2d, conv2d_grads
from .train import format_float


@dataclass
class BenchConfig:
    channels: int = 64
    units: int = 2
    sigma: float = 0.5
    max_displacement: float = 4.0
    height: int = 32
    width: int = 32
    batch: int = 1
    warmup: int = 3
    iters: int = 20
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.warmup < 3:
            raise ValueError("benchmark needs at least 3 warmup iterations")
        if self.iters < 20:
            raise ValueError("benchmark needs at least 20 measured iterations")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def _timeit(fn, warmup, iters):
    for _ in range(warmup):
        fn()
    samples = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter()
        fn()
        samples[i] = time.perf_counter() - t0
    med = float(np.median(samples))
    mad = float(np.median(np.abs(samples - med)))
    return med, mad


def run_bench(cfg):
    """Returns (rows, canvas_side). Rows: dicts with path, phase, median_s,
    mad_s, speedup_vs_efficient, gamma."""
    rng = np.random.default_rng(cfg.seed)
    c = cfg.channels
    dau_cfg = DAUConfig(c, c, cfg.units, sigma=cfg.sigma,
                        max_displacement=cfg.max_displacement)
    params = DAUParams(rng.standard_normal((c, c, cfg.units)) * 0.1,
                       rng.uniform(-cfg.max_displacement, cfg.max_displacement,
                                   (c, c, cfg.units, 2)),
                       cfg.sigma, np.zeros(c))
    x = rng.standard_normal((cfg.batch, c, cfg.height, cfg.width)).astype(cfg.dtype)
    side = 2 * canvas_radius(dau_cfg) + 1
    gamma = speedup_estimate(side, side, cfg.units)

    _, cache = forward_efficient(x, params, dau_cfg)
    grad = rng.standard_normal(cache.z.shape).astype(cfg.dtype)
    dense_kernels = rng.standard_normal((c, c, side, side)).astype(cfg.dtype) * 0.01

    def eff_fwd():
        forward_efficient(x, params, dau_cfg)

    def eff_fwd_bwd():
        _, cache = forward_efficient(x, params, dau_cfg)
        backward_efficient(cache, grad, params, dau_cfg)

    def naive_fwd():
        forward_naive(x, params, dau_cfg, "analytic")

    def naive_fwd_bwd():
        _, z = forward_naive(x, params, dau_cfg, "analytic")
        backward_naive(x, z, grad, params, dau_cfg)

    def conv_fwd():
        conv2d(x, dense_kernels, params.bias.astype(cfg.dtype))

    def conv_fwd_bwd():
        conv2d(x, dense_kernels, params.bias.astype(cfg.dtype))
        conv2d_grads(x, dense_kernels, grad)

    cases = [
        ("efficient", "forward", eff_fwd),
        ("efficient", "forward_backward", eff_fwd_bwd),
        ("naive_canvas", "forward", naive_fwd),
        ("naive_canvas", "forward_backward", naive_fwd_bwd),
        ("plain_conv", "forward", conv_fwd),
        ("plain_conv", "forward_backward", conv_fwd_bwd),
    ]
    timings = {}
    rows = []
    for path, phase, fn in cases:
        med, mad = _timeit(fn, cfg.warmup, cfg.iters)
        timings[(path, phase)] = med
        rows.append({"path": path, "phase": phase, "median_s": med, "mad_s": mad})
    for row in rows:
        base = timings[("efficient", row["phase"])]
        row["speedup_vs_efficient"] = row["median_s"] / base
        row["gamma"] = gamma
    return rows, side


BENCH_COLUMNS = ("path", "phase", "median_s", "mad_s",
                 "speedup_vs_efficient", "gamma")


def write_bench(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(BENCH_COLUMNS) + "\n")
        for row in rows:
            cells = [str(row["path"]), str(row["phase"])]
            cells += [format_float(row[c]) for c in BENCH_COLUMNS[2:]]
            fh.write(",".join(cells) + "\n")


def render_bench(rows, side):
    lines = [f"effective kernel {side}x{side}",
             f"{'path':<14}{'phase':<18}{'median [ms]':>12}{'mad [ms]':>10}"
             f"{'vs efficient':>14}{'gamma':>9}"]
    for row in rows:
        lines.append(f"{row['path']:<14}{row['phase']:<18}"
                     f"{row['median_s'] * 1e3:>12.2f}{row['mad_s'] * 1e3:>10.2f}"
                     f"{row['speedup_vs_efficient']:>14.2f}{row['gamma']:>9.3f}")
    return "\n".join(lines)
