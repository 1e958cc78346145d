import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dauconv import layer as L
from dauconv.gaussian import ParameterError, gaussian_kernel
from dauconv.tensor_ops import conv2d, DimensionError


def random_params(cfg, rng, mu_span=None):
    f, s, k = cfg.out_channels, cfg.in_channels, cfg.units_per_filter
    span = cfg.max_displacement if mu_span is None else mu_span
    w = rng.standard_normal((f, s, k))
    mu = rng.uniform(-span, span, size=(f, s, k, 2))
    return L.DAUParams(w, mu, cfg.sigma, rng.standard_normal(f) * 0.1)


def test_config_validation():
    with pytest.raises(L.ConfigurationError):
        L.DAUConfig(2, 2, 0)
    with pytest.raises(L.ConfigurationError):
        L.DAUConfig(2, 2, 1, sigma=-1.0)
    with pytest.raises(L.ConfigurationError):
        L.DAUConfig(2, 2, 1, mode="efficient", sigma_learnable=True)
    with pytest.raises(L.ConfigurationError):
        L.DAUConfig(2, 2, 1, mode="nope")
    with pytest.raises(L.ConfigurationError):
        # derivative kernels vanish numerically below the sigma floor
        L.DAUConfig(2, 2, 1, sigma=0.01, mode="general", sigma_learnable=True)
    L.DAUConfig(2, 2, 1, mode="general", sigma_learnable=True)


def test_bilinear_stencil_values():
    st_ = L.bilinear_stencil((0.5, 0.0))
    assert st_.base == (0, 0)
    np.testing.assert_allclose(st_.weights, [[0.5, 0.0], [0.5, 0.0]])
    st_ = L.bilinear_stencil((-1.25, 2.75))
    assert st_.base == (-2, 2)
    np.testing.assert_allclose(st_.weights.sum(), 1.0)
    # integer displacement collapses to a one-hot stencil
    st_ = L.bilinear_stencil((3.0, -2.0))
    assert st_.base == (3, -2)
    np.testing.assert_array_equal(st_.weights, [[1.0, 0.0], [0.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(st.floats(-4, 4, allow_nan=False), st.floats(-4, 4, allow_nan=False))
def test_stencil_weights_partition_of_unity(my, mx):
    w = L.bilinear_stencil((my, mx)).weights
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) <= 1e-15


def test_clamp_displacements():
    cfg = L.DAUConfig(1, 1, 2)
    p = L.DAUParams(np.ones((1, 1, 2)),
                    np.array([[[[5.2, -0.3], [-4.0001, 4.0]]]]),
                    0.5, np.zeros(1))
    q = L.clamp_displacements(p, 4.0)
    np.testing.assert_array_equal(q.mu, [[[[4.0, -0.3], [-4.0, 4.0]]]])
    # in-range params come back untouched
    r = L.clamp_displacements(q, 4.0)
    assert r is q


def test_rasterize_analytic_single_unit_matches_padded_blur():
    cfg = L.DAUConfig(1, 1, 1, sigma=0.5, max_displacement=4.0, mode="general")
    p = L.DAUParams(np.ones((1, 1, 1)), np.zeros((1, 1, 1, 2)), 0.5, np.zeros(1))
    k = L.rasterize_analytic(p, cfg)
    assert k.shape == (1, 1, 13, 13)
    padded = np.zeros((13, 13))
    padded[4:9, 4:9] = gaussian_kernel(0.5)
    scale = np.abs(padded).max()
    assert np.abs(k[0, 0] - padded).max() / scale < 1e-4


def test_rasterize_analytic_cancellation_and_linearity(rng):
    cfg = L.DAUConfig(1, 1, 2, sigma=0.5, mode="general")
    mu = rng.uniform(-2, 2, size=(1, 1, 2, 2))
    mu[0, 0, 1] = mu[0, 0, 0]
    p = L.DAUParams(np.array([[[1.0, -1.0]]]), mu, 0.5, np.zeros(1))
    np.testing.assert_allclose(L.rasterize_analytic(p, cfg), 0.0, atol=1e-15)

    cfg1 = L.DAUConfig(1, 1, 1, sigma=0.5, mode="general")
    mu1 = mu[:, :, :1]
    p1 = L.DAUParams(np.array([[[1.0]]]), mu1, 0.5, np.zeros(1))
    p2 = L.DAUParams(np.array([[[2.0]]]), mu1, 0.5, np.zeros(1))
    np.testing.assert_array_equal(L.rasterize_analytic(p2, cfg1),
                                  2.0 * L.rasterize_analytic(p1, cfg1))


def test_rasterize_reference_integer_mu_is_shifted_blur():
    cfg = L.DAUConfig(1, 1, 1, sigma=0.5)
    p = L.DAUParams(np.ones((1, 1, 1)),
                    np.array([[[[2.0, -1.0]]]]), 0.5, np.zeros(1))
    k = L.rasterize_reference(p, cfg)
    g = gaussian_kernel(0.5)
    want = np.zeros((13, 13))
    # copy of the blur kernel at grid offset (-2, +1) from center
    want[6 - 2 - 2:6 - 2 + 3, 6 + 1 - 2:6 + 1 + 3] = g
    np.testing.assert_array_equal(k[0, 0], want)


def test_rasterize_reference_half_pixel_average():
    cfg = L.DAUConfig(1, 1, 1, sigma=0.5)
    p0 = L.DAUParams(np.ones((1, 1, 1)), np.zeros((1, 1, 1, 2)), 0.5, np.zeros(1))
    p1 = L.DAUParams(np.ones((1, 1, 1)), np.array([[[[1.0, 0.0]]]]), 0.5, np.zeros(1))
    ph = L.DAUParams(np.ones((1, 1, 1)), np.array([[[[0.5, 0.0]]]]), 0.5, np.zeros(1))
    k = L.rasterize_reference(ph, cfg)
    want = 0.5 * (L.rasterize_reference(p0, cfg) + L.rasterize_reference(p1, cfg))
    np.testing.assert_allclose(k, want, atol=1e-15)


def test_rasterize_reference_rejects_clamp_violation():
    cfg = L.DAUConfig(1, 1, 1, sigma=0.5, max_displacement=2.0)
    p = L.DAUParams(np.ones((1, 1, 1)), np.array([[[[2.5, 0.0]]]]), 0.5, np.zeros(1))
    with pytest.raises(ParameterError):
        L.rasterize_reference(p, cfg)


def test_analytic_reference_agree_for_integer_mu(rng):
    f, s, k = 3, 2, 2
    w = rng.standard_normal((f, s, k))
    mu = rng.integers(-3, 4, size=(f, s, k, 2)).astype(float)
    p = L.DAUParams(w, mu, 0.5, np.zeros(f))
    cfg = L.DAUConfig(s, f, k, sigma=0.5, max_displacement=4.0)
    ka = L.rasterize_analytic(p, cfg)
    kr = L.rasterize_reference(p, cfg)
    scale = np.abs(kr).max()
    assert np.abs(ka - kr).max() / scale < 1e-4


def test_forward_naive_zero_input_gives_bias():
    cfg = L.DAUConfig(2, 3, 2, sigma=0.5)
    rng = np.random.default_rng(0)
    p = random_params(cfg, rng)
    out, z = L.forward_naive(np.zeros((2, 2, 6, 6)), p, cfg, rasterizer="reference")
    np.testing.assert_allclose(z, p.bias[None, :, None, None] * np.ones_like(z), atol=1e-15)
    np.testing.assert_array_equal(out, np.maximum(z, 0))


def test_forward_naive_small_sigma_integer_shift(rng):
    # a single tight unit at an integer displacement approximates a translation
    cfg = L.DAUConfig(1, 1, 1, sigma=0.2, max_displacement=4.0, mode="general")
    p = L.DAUParams(np.ones((1, 1, 1)), np.array([[[[2.0, 0.0]]]]), 0.2, np.zeros(1))
    x = rng.standard_normal((1, 1, 8, 8))
    _, z = L.forward_naive(x, p, cfg)
    shifted = np.zeros_like(x)
    shifted[0, 0, 2:, :] = x[0, 0, :-2, :]
    assert np.abs(z - shifted).max() < 1e-4 * np.abs(x).max()


def test_forward_efficient_blur_only():
    cfg = L.DAUConfig(1, 1, 1, sigma=0.5)
    p = L.DAUParams(np.ones((1, 1, 1)), np.zeros((1, 1, 1, 2)), 0.5,
                    np.array([0.25]))
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 1, 9, 9))
    out, cache = L.forward_efficient(x, p, cfg)
    blurred = conv2d(x, gaussian_kernel(0.5)[None, None])
    np.testing.assert_allclose(cache.z, blurred + 0.25, atol=1e-12)
    np.testing.assert_array_equal(out, np.maximum(cache.z, 0))


def test_forward_efficient_integer_mu_translates_blur(rng):
    cfg = L.DAUConfig(1, 1, 1, sigma=0.5)
    p = L.DAUParams(np.ones((1, 1, 1)), np.array([[[[3.0, -2.0]]]]), 0.5, np.zeros(1))
    x = rng.standard_normal((1, 1, 10, 10))
    _, cache = L.forward_efficient(x, p, cfg)
    # z[y, x] = blurred[y - 3, x + 2]: a bitwise copy of the layer's own blur
    # field (the one-hot stencil does no arithmetic)
    pad = cache.pad
    own_blur = cache.blurred[:, :, pad:pad + 10, pad:pad + 10]
    np.testing.assert_array_equal(cache.z[0, 0, 3:, :-2], own_blur[0, 0, :-3, 2:])
    # and it matches an independent convolution up to roundoff
    blurred = conv2d(x, gaussian_kernel(0.5)[None, None])
    np.testing.assert_allclose(cache.z[0, 0, 3:, :-2], blurred[0, 0, :-3, 2:],
                               atol=1e-14)


def test_forward_efficient_rejects_clamp_violation(rng):
    cfg = L.DAUConfig(1, 1, 1, sigma=0.5, max_displacement=2.0)
    p = L.DAUParams(np.ones((1, 1, 1)), np.array([[[[2.2, 0.0]]]]), 0.5, np.zeros(1))
    with pytest.raises(ParameterError):
        L.forward_efficient(rng.standard_normal((1, 1, 6, 6)), p, cfg)


def test_forward_channel_mismatch(rng):
    cfg = L.DAUConfig(3, 2, 1)
    p = random_params(cfg, rng)
    with pytest.raises(DimensionError):
        L.forward_efficient(rng.standard_normal((1, 2, 6, 6)), p, cfg)
    with pytest.raises(DimensionError):
        L.forward_naive(rng.standard_normal((1, 2, 6, 6)), p, cfg, "reference")


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-4)])
def test_efficient_equals_reference_conv(dtype, tol):
    rng = np.random.default_rng(99)
    for trial in range(10):
        s = int(rng.integers(1, 5))
        f = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        cfg = L.DAUConfig(s, f, k, sigma=0.5, max_displacement=4.0)
        p = L.DAUParams(rng.standard_normal((f, s, k)),
                        rng.uniform(-4, 4, size=(f, s, k, 2)),
                        0.5, rng.standard_normal(f))
        x = rng.standard_normal((2, s, 16, 16)).astype(dtype)
        _, cache = L.forward_efficient(x, p, cfg)
        kernels = L.rasterize_reference(p, cfg).astype(dtype)
        z_ref = conv2d(x, kernels, p.bias.astype(dtype))
        assert np.abs(cache.z - z_ref).max() < tol


def test_efficient_equals_naive_reference(rng):
    cfg = L.DAUConfig(3, 4, 2, sigma=0.5, max_displacement=4.0)
    p = random_params(cfg, rng)
    x = rng.standard_normal((2, 3, 12, 12))
    _, cache = L.forward_efficient(x, p, cfg)
    _, z = L.forward_naive(x, p, cfg, rasterizer="reference")
    assert np.abs(cache.z - z).max() < 1e-10


def test_inactive_units_equal_zero_weight(rng):
    cfg = L.DAUConfig(2, 3, 2, sigma=0.5)
    p = random_params(cfg, rng)
    x = rng.standard_normal((1, 2, 10, 10))
    # zero one unit's weight vs deactivating it
    pz = p.copy()
    pz.w[1, 0, 1] = 0.0
    pa = pz.copy()
    pa.active[1, 0, 1] = False
    _, cz = L.forward_efficient(x, pz, cfg)
    _, ca = L.forward_efficient(x, pa, cfg)
    assert np.array_equal(cz.z, ca.z)


def test_linearity_in_w_and_input(rng):
    cfg = L.DAUConfig(2, 2, 2, sigma=0.5)
    p = random_params(cfg, rng)
    p.bias[:] = 0.0
    x = rng.standard_normal((1, 2, 8, 8))
    _, c1 = L.forward_efficient(x, p, cfg)
    p2 = p.copy()
    p2.w *= 3.0
    _, c2 = L.forward_efficient(x, p2, cfg)
    np.testing.assert_allclose(c2.z, 3.0 * c1.z, rtol=1e-12, atol=1e-12)
    _, c3 = L.forward_efficient(2.0 * x, p, cfg)
    np.testing.assert_allclose(c3.z, 2.0 * c1.z, rtol=1e-12, atol=1e-12)
