import numpy as np
import pytest


def loop_conv2d(x, kernels, bias=None):
    """Six-nested-loop convolution oracle: stride 1, zero-same padding.

    Deliberately independent of the library implementation.
    """
    n, s, h, w = x.shape
    f, _, kh, kw = kernels.shape
    ay, ax = kh // 2, kw // 2
    if bias is None:
        bias = np.zeros(f)
    out = np.zeros((n, f, h, w), dtype=np.float64)
    for ni in range(n):
        for fi in range(f):
            for y in range(h):
                for xx in range(w):
                    acc = 0.0
                    for si in range(s):
                        for dy in range(kh):
                            for dx in range(kw):
                                yy = y + dy - ay
                                xc = xx + dx - ax
                                if 0 <= yy < h and 0 <= xc < w:
                                    acc += kernels[fi, si, dy, dx] * x[ni, si, yy, xc]
                    out[ni, fi, y, xx] = acc + bias[fi]
    return out


def rel_err(analytic, numeric, floor_frac=1e-9):
    """Worst per-coordinate relative error with a group-scale floor.

    Coordinates whose magnitudes are below floor_frac times the group's
    largest magnitude are compared on that floor instead of their own size.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return float(np.abs(a - b).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor_frac * scale)
    return float((np.abs(a - b) / denom).max())


def blob_field(shape, n_blobs, scale, rng, margin=None):
    """Sum of broad signed Gaussian bumps kept away from the image border."""
    h, w = shape
    if margin is None:
        margin = min(h, w) // 4
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    out = np.zeros((h, w))
    for _ in range(n_blobs):
        cy = rng.uniform(margin, h - margin)
        cx = rng.uniform(margin, w - margin)
        amp = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        s = scale * rng.uniform(0.8, 1.25)
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
