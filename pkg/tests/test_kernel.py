"""Numeric kernels: init determinism, backward rules vs finite differences."""

import numpy as np
import pytest

from completep.kernel import (
    LN_EPS,
    RngStream,
    ShapeError,
    alibi_bias,
    alibi_slopes,
    cross_entropy,
    gaussian_init,
    layernorm_bwd,
    layernorm_fwd,
    matmul,
    relu2_bwd,
    relu2_fwd,
    softmax_rows,
    softmax_rows_bwd,
)

RNG = np.random.default_rng(7)


def central_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        fp = f()
        flat_x[i] = orig - eps
        fm = f()
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2 * eps)
    return g


def test_rng_stream_determinism_and_independence():
    a = RngStream(3, 5).generator().standard_normal(16)
    b = RngStream(3, 5).generator().standard_normal(16)
    c = RngStream(3, 6).generator().standard_normal(16)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_gaussian_init_determinism_and_stats():
    x = gaussian_init(RngStream(0, 1), (400, 400), 0.02, dtype=np.float64)
    y = gaussian_init(RngStream(0, 1), (400, 400), 0.02, dtype=np.float64)
    np.testing.assert_array_equal(x, y)
    assert abs(x.std() - 0.02) < 0.001
    assert abs(x.mean()) < 0.001
    z = gaussian_init(RngStream(0, 1), (8,), 0.0)
    np.testing.assert_array_equal(z, np.zeros(8, dtype=np.float32))
    with pytest.raises(ValueError):
        gaussian_init(RngStream(0, 1), (8,), -1.0)


def test_gaussian_init_float32_matches_float64_to_rounding():
    x32 = gaussian_init(RngStream(4, 2), (64,), 0.5, dtype=np.float32)
    x64 = gaussian_init(RngStream(4, 2), (64,), 0.5, dtype=np.float64)
    np.testing.assert_array_equal(x32, x64.astype(np.float32))


def test_matmul_shape_check():
    with pytest.raises(ShapeError):
        matmul(np.zeros((3, 4)), np.zeros((5, 6)))
    out = matmul(np.ones((3, 4)), np.ones((4, 2)))
    assert out.shape == (3, 2)


def test_layernorm_forward_properties():
    x = RNG.standard_normal((5, 7))
    gain = RNG.standard_normal(7)
    bias = RNG.standard_normal(7)
    y, _ = layernorm_fwd(x, gain, bias)
    xhat = (y - bias) / gain
    np.testing.assert_allclose(xhat.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(xhat.var(axis=-1), 1.0, atol=1e-4)
    # Constant rows normalize to exactly the bias (gain * 0 + bias).
    yc, _ = layernorm_fwd(np.full((2, 7), 3.0), gain, bias)
    np.testing.assert_allclose(yc, np.broadcast_to(bias, (2, 7)), atol=1e-12)
    with pytest.raises(ShapeError):
        layernorm_fwd(x, np.ones(6), np.zeros(6))
    with pytest.raises(ValueError):
        layernorm_fwd(x, gain, bias, eps_ln=0.0)


def test_layernorm_backward_vs_fd():
    x = RNG.standard_normal((3, 9))
    gain = RNG.standard_normal(9) + 1.5
    bias = RNG.standard_normal(9)
    w = RNG.standard_normal((3, 9))  # loss = sum(w * y)

    def loss():
        y, _ = layernorm_fwd(x, gain, bias)
        return float(np.sum(w * y))

    _, cache = layernorm_fwd(x, gain, bias)
    dx, dgain, dbias = layernorm_bwd(cache, w)
    np.testing.assert_allclose(dx, central_diff(loss, x), atol=1e-6)
    np.testing.assert_allclose(dgain, central_diff(loss, gain), atol=1e-6)
    np.testing.assert_allclose(dbias, central_diff(loss, bias), atol=1e-6)


def test_relu2():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    np.testing.assert_array_equal(relu2_fwd(x), np.array([0.0, 0.0, 0.0, 0.25, 4.0]))
    dy = np.ones_like(x)
    np.testing.assert_array_equal(relu2_bwd(x, dy), np.array([0.0, 0.0, 0.0, 1.0, 4.0]))
    # FD check away from the kink.
    xs = np.array([0.3, 1.7, -1.1])
    w = np.array([1.0, -2.0, 0.5])

    def loss():
        return float(np.sum(w * relu2_fwd(xs)))

    np.testing.assert_allclose(relu2_bwd(xs, w), central_diff(loss, xs), atol=1e-6)


def test_softmax_rows_properties_and_bwd():
    x = RNG.standard_normal((4, 6)) * 3
    p = softmax_rows(x)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)
    # -inf maps to exactly zero probability.
    masked = x.copy()
    masked[:, -1] = -np.inf
    pm = softmax_rows(masked)
    np.testing.assert_array_equal(pm[:, -1], 0.0)

    w = RNG.standard_normal((4, 6))

    def loss():
        return float(np.sum(w * softmax_rows(x)))

    dx = softmax_rows_bwd(softmax_rows(x), w)
    np.testing.assert_allclose(dx, central_diff(loss, x), atol=1e-6)


def test_cross_entropy_value_and_grad():
    logits = RNG.standard_normal((3, 4, 11))
    targets = RNG.integers(0, 11, size=(3, 4))
    loss, dlogits = cross_entropy(logits, targets)
    # Reference via explicit log-softmax.
    p = softmax_rows(logits)
    ref = -np.mean(
        np.log(p.reshape(-1, 11)[np.arange(12), targets.reshape(-1)])
    )
    assert loss == pytest.approx(ref, rel=1e-12)

    def floss():
        return cross_entropy(logits, targets)[0]

    np.testing.assert_allclose(dlogits, central_diff(floss, logits), atol=1e-6)
    with pytest.raises(ShapeError):
        cross_entropy(logits, targets[:, :2])


def test_cross_entropy_uniform_logits():
    logits = np.zeros((2, 3, 7))
    targets = np.zeros((2, 3), dtype=int)
    loss, _ = cross_entropy(logits, targets)
    assert loss == pytest.approx(np.log(7.0), rel=1e-12)


def test_alibi_slopes_and_bias():
    s = alibi_slopes(4)
    np.testing.assert_allclose(s, [2.0**-2, 2.0**-4, 2.0**-6, 2.0**-8])
    bias = alibi_bias(2, 5, dtype=np.float64)
    assert bias.shape == (2, 5, 5)
    # Strictly causal: future positions are -inf.
    i, j = np.triu_indices(5, k=1)
    assert np.all(np.isinf(bias[:, i, j])) and np.all(bias[:, i, j] < 0)
    # Diagonal is zero; penalty grows linearly with distance.
    np.testing.assert_array_equal(np.diagonal(bias, axis1=1, axis2=2), 0.0)
    assert bias[0, 3, 1] == pytest.approx(-alibi_slopes(2)[0] * 2)
    with pytest.raises(ValueError):
        alibi_bias(0, 5)


def test_ln_eps_constant():
    assert LN_EPS == 1e-5
