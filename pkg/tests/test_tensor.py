import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from znet.tensor import (
    BatchNormParams, ContractError, ConvParams, ShapeError, batchnorm_backward, batchnorm_forward,
    center_crop, center_crop_backward, concat_channels, conv2d_backward, conv2d_forward, grad_check,
    load_tensor, maxpool2x2_backward, maxpool2x2_forward, relu, relu_backward, save_tensor,
    split_channels, upsample2x_nearest, upsample2x_nearest_backward,
)

floats = st.floats(-10, 10, allow_nan=False, width=64)


def conv(cout, cin, rng=None, identity=False, ones=False):
    if identity:
        w = np.zeros((cout, cin, 3, 3))
        for o in range(cout):
            w[o, o, 1, 1] = 1.0
    elif ones:
        w = np.ones((cout, cin, 3, 3))
    else:
        w = rng.standard_normal((cout, cin, 3, 3))
    return ConvParams(w, np.zeros(cout))


def test_conv_all_ones():
    out = conv2d_forward(np.ones((1, 1, 3, 3)), conv(1, 1, ones=True))
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 1] == 6
    assert out[0, 0, 0, 0] == 4


def test_conv_identity_and_shape():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8))
    np.testing.assert_array_equal(conv2d_forward(x, conv(3, 3, identity=True)), x)
    assert conv2d_forward(x, conv(4, 3, rng)).shape == (2, 4, 8, 8)


def test_conv_channel_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        conv2d_forward(np.zeros((1, 2, 4, 4)), conv(1, 3, np.random.default_rng(0)))


def test_conv_backward_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 5, 5))
    g = rng.standard_normal((2, 2, 5, 5))
    p = conv(2, 2, identity=True)
    np.testing.assert_allclose(conv2d_backward(x, p, g), g)
    np.testing.assert_allclose(p.dbias, g.sum(axis=(0, 2, 3)))


def test_conv_backward_all_ones_mirror():
    p = conv(1, 1, ones=True)
    gx = conv2d_backward(np.zeros((1, 1, 3, 3)), p, np.ones((1, 1, 3, 3)))
    assert gx[0, 0, 1, 1] == 9
    assert gx[0, 0, 0, 0] == 4


def test_conv_backward_shape_error():
    p = conv(2, 1, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        conv2d_backward(np.zeros((1, 1, 4, 4)), p, np.zeros((1, 3, 4, 4)))


def _probe(shape, seed=7):
    return np.random.default_rng(seed).standard_normal(shape)


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 6, 6))
    p = conv(3, 2, rng)
    p.bias[:] = rng.standard_normal(3)
    probe = _probe((1, 3, 6, 6))

    def f():
        return float((conv2d_forward(x, p) * probe).sum())

    gx = conv2d_backward(x, p, probe)
    assert grad_check(f, [x, p.weight, p.bias], [gx, p.dweight, p.dbias]) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conv_is_linear(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 1, 2, 5, 5))
    p = conv(3, 2, rng)
    np.testing.assert_allclose(conv2d_forward(x + y, p), conv2d_forward(x, p) + conv2d_forward(y, p),
                               atol=1e-10)
    w2 = rng.standard_normal(p.weight.shape)
    lhs = conv2d_forward(x, ConvParams(p.weight + w2, np.zeros(3)))
    rhs = conv2d_forward(x, p) + conv2d_forward(x, ConvParams(w2, np.zeros(3)))
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# batch norm ---------------------------------------------------------------


def test_batchnorm_two_point():
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    out, _ = batchnorm_forward(x, BatchNormParams.create(1))
    np.testing.assert_allclose(out.ravel(), [-1, 1], atol=1e-4)


def test_batchnorm_affine_case():
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 1, 2, 2)
    p = BatchNormParams.create(1)
    p.gamma[:] = 2
    p.beta[:] = 5
    out, cache = batchnorm_forward(x, p)
    np.testing.assert_allclose(out, 2 * cache.xhat + 5)
    np.testing.assert_allclose(out, 2 * x + 5, atol=1e-4)


def test_batchnorm_eval_identity():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    out, cache = batchnorm_forward(x, BatchNormParams.create(3), "eval")
    np.testing.assert_allclose(out, x, rtol=1e-5)
    with pytest.raises(ContractError):
        batchnorm_backward(cache, BatchNormParams.create(3), x)


def test_batchnorm_running_stats_update():
    x = np.random.default_rng(0).standard_normal((4, 2, 3, 3)) * 3 + 1
    p = BatchNormParams.create(2, momentum=0.9)
    batchnorm_forward(x, p)
    np.testing.assert_allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_train_normalises():
    x = np.random.default_rng(3).standard_normal((3, 4, 5, 5)) * 7 - 2
    _, cache = batchnorm_forward(x, BatchNormParams.create(4))
    assert np.abs(cache.xhat.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(cache.xhat.var(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_batchnorm_backward_properties():
    x = np.random.default_rng(4).standard_normal((2, 3, 4, 4))
    p = BatchNormParams.create(3)
    _, cache = batchnorm_forward(x, p)
    g = np.full(x.shape, 0.7)
    gx = batchnorm_backward(cache, p, g)
    assert np.abs(gx.sum(axis=(0, 2, 3))).max() < 1e-10
    np.testing.assert_allclose(p.dbeta, g.sum(axis=(0, 2, 3)))


def test_batchnorm_backward_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 4))
    p = BatchNormParams.create(3)
    p.gamma[:] = rng.uniform(0.5, 2, 3)
    p.beta[:] = rng.standard_normal(3)
    probe = _probe(x.shape)

    def f():
        return float((batchnorm_forward(x, p)[0] * probe).sum())

    _, cache = batchnorm_forward(x, p)
    gx = batchnorm_backward(cache, p, probe)
    assert grad_check(f, [x, p.gamma, p.beta], [gx, p.dgamma, p.dbeta]) < 1e-4


def test_batchnorm_channel_mismatch():
    with pytest.raises(ShapeError):
        batchnorm_forward(np.zeros((1, 2, 2, 2)), BatchNormParams.create(3))


# relu / pool / concat / crop / upsample -------------------------------------


def test_relu():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 5.0])), [0, 5])
    assert relu_backward(np.array([0.0]), np.array([3.0]))[0] == 0


@given(arrays(np.float64, (2, 7), elements=floats))
def test_relu_idempotent(x):
    np.testing.assert_array_equal(relu(relu(x)), relu(x))


def test_relu_grad_check():
    x = np.array([-1.0, 2.0])

    def f():
        return float(relu(x).sum())

    g = relu_backward(x, np.ones(2))
    np.testing.assert_array_equal(g, [0, 1])
    assert grad_check(f, [x], [g]) < 1e-8


def test_maxpool_basic():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out, cache = maxpool2x2_forward(x)
    assert out.item() == 4
    np.testing.assert_array_equal(maxpool2x2_backward(cache, np.ones((1, 1, 1, 1)))[0, 0], [[0, 0], [0, 1]])


def test_maxpool_tie_goes_to_first_cell():
    out, cache = maxpool2x2_forward(np.full((1, 1, 4, 4), 3.0))
    assert (out == 3).all()
    g = maxpool2x2_backward(cache, np.ones((1, 1, 2, 2)))[0, 0]
    np.testing.assert_array_equal(g[::2, ::2], 1)
    assert g.sum() == 4


def test_maxpool_shapes():
    assert maxpool2x2_forward(np.zeros((1, 1, 256, 256)))[0].shape == (1, 1, 128, 128)
    with pytest.raises(ShapeError):
        maxpool2x2_forward(np.zeros((1, 1, 5, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_maxpool_conserves_gradient_mass(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-3, 3, (2, 3, 6, 8)).astype(float)  # ties are frequent
    out, cache = maxpool2x2_forward(x)
    g = rng.standard_normal(out.shape)
    gx = maxpool2x2_backward(cache, g)
    assert np.isclose(gx.sum(), g.sum())
    assert (cache.argmax >= 0).all() and (cache.argmax < 4).all()


def test_maxpool_finite_differences():
    x = np.random.default_rng(6).standard_normal((1, 2, 4, 6))
    probe = _probe((1, 2, 2, 3))

    def f():
        return float((maxpool2x2_forward(x)[0] * probe).sum())

    _, cache = maxpool2x2_forward(x)
    assert grad_check(f, [x], [maxpool2x2_backward(cache, probe)]) < 1e-4


def test_concat_and_split():
    a, b = np.ones((1, 16, 8, 8)), np.zeros((1, 16, 8, 8))
    c = concat_channels(a, b)
    assert c.shape == (1, 32, 8, 8)
    sa, sb = split_channels(c, 16)
    np.testing.assert_array_equal(sa, a)
    np.testing.assert_array_equal(sb, b)
    with pytest.raises(ShapeError):
        concat_channels(a, np.zeros((1, 0, 8, 8)))
    with pytest.raises(ShapeError):
        concat_channels(a, np.zeros((1, 2, 4, 8)))


def test_concat_default_shape():
    assert concat_channels(np.zeros((1, 16, 128, 128)), np.zeros((1, 16, 128, 128))).shape == (1, 32, 128, 128)


def test_center_crop():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(center_crop(x, 2, 2)[0, 0], x[0, 0, 1:3, 1:3])
    np.testing.assert_array_equal(center_crop(x, 4, 4), x)
    big = np.arange(256 * 256.0).reshape(1, 1, 256, 256)
    assert center_crop(big, 128, 128)[0, 0, 0, 0] == big[0, 0, 64, 64]
    with pytest.raises(ShapeError):
        center_crop(x, 5, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6))
def test_crop_adjoint(seed, h2, w2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 6, 6))
    g = rng.standard_normal((2, 2, h2, w2))
    lhs = (center_crop(x, h2, w2) * g).sum()
    rhs = (x * center_crop_backward(g, x.shape)).sum()
    assert np.isclose(lhs, rhs)


def test_upsample():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(
        upsample2x_nearest(x)[0, 0],
        [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
    )
    np.testing.assert_array_equal(upsample2x_nearest_backward(np.ones((1, 1, 4, 4))), np.full((1, 1, 2, 2), 4))


@given(arrays(np.float64, (1, 2, 3, 4), elements=floats))
def test_pool_inverts_upsample(x):
    np.testing.assert_array_equal(maxpool2x2_forward(upsample2x_nearest(x))[0], x)


def test_upsample_adjoint():
    rng = np.random.default_rng(8)
    x, g = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 2, 6, 6))
    assert np.isclose((upsample2x_nearest(x) * g).sum(), (x * upsample2x_nearest_backward(g)).sum())


# harness / determinism / dump -------------------------------------------------


def test_grad_check_rejects_nonfinite():
    x = np.array([1.0])
    with pytest.raises(ContractError):
        grad_check(lambda: float("nan"), [x], [np.zeros(1)])


def test_grad_check_requires_float64():
    with pytest.raises(ContractError):
        grad_check(lambda: 0.0, [np.zeros(2, np.float32)], [np.zeros(2)])


def test_kernels_deterministic():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    p = ConvParams(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), np.zeros(4, np.float32))
    assert conv2d_forward(x, p).tobytes() == conv2d_forward(x, p).tobytes()


def test_tensor_dump_roundtrip(tmp_path):
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
    save_tensor(tmp_path / "t.bin", x)
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:16] == np.array([2, 3, 4, 5], "<u4").tobytes()
    np.testing.assert_array_equal(load_tensor(tmp_path / "t.bin"), x)
