import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qeegnet import nn
from qeegnet.errors import ShapeError, StateError


def naive_depthwise(x, w):
    """Direct loop convolution: valid in height, same in width."""
    b, cin, h, width = x.shape
    cout, _, kh, kw = w.shape
    d = cout // cin
    left = (kw - 1) // 2
    out = np.zeros((b, cout, h - kh + 1, width))
    for n in range(b):
        for o in range(cout):
            c = o // d
            for r in range(h - kh + 1):
                for t in range(width):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            src = t + j - left
                            if 0 <= src < width:
                                acc += x[n, c, r + i, src] * w[o, 0, i, j]
                    out[n, o, r, t] = acc
    return out


def numeric_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else np.linalg.norm(a - b) / scale


def check_layer(layer, x, training=True):
    rng = np.random.default_rng(7)
    out = layer.forward(x, training)
    r = rng.normal(size=out.shape)
    dx = layer.backward(r)
    grads = {k: v.copy() for k, v in layer.grads.items()}
    loss = lambda: float(np.sum(layer.forward(x, training) * r))
    if dx is not None:
        assert rel_err(dx, numeric_grad(loss, x)) < 1e-5
    for k, p in layer.params.items():
        assert rel_err(grads[k], numeric_grad(loss, p)) < 1e-5, k


def test_depthwise_matches_naive(rng):
    x = rng.normal(size=(2, 3, 4, 9))
    for kernel in [(1, 4), (2, 3), (4, 1), (1, 1)]:
        w = rng.normal(size=(6, 1) + kernel)
        y, _ = nn.depthwise_conv2d_forward(x, w)
        assert np.allclose(y, naive_depthwise(x, w), atol=1e-12)


def test_separable_examples():
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3)
    k = nn.ConvKernels(np.array([1.0, 0, 0]).reshape(1, 1, 1, 3), np.ones((1, 1, 1, 1)))
    # same padding with a centred 3-tap kernel: out[t] = x[t-1]
    assert np.array_equal(nn.depthwise_separable_conv_forward(x, k).ravel(), [0.0, 1.0, 2.0])
    assert not nn.depthwise_separable_conv_forward(np.zeros((2, 1, 1, 3)), k).any()


def test_separable_identity_pointwise_and_composition(rng):
    x = rng.normal(size=(2, 4, 3, 10))
    dw = rng.normal(size=(8, 1, 2, 5))
    mid, _ = nn.depthwise_conv2d_forward(x, dw)
    ident = nn.ConvKernels(dw, np.eye(8).reshape(8, 8, 1, 1))
    assert np.allclose(nn.depthwise_separable_conv_forward(x, ident), mid, atol=1e-13)
    pw = rng.normal(size=(5, 8, 1, 1))
    composed = np.einsum("oc,bchw->bohw", pw[:, :, 0, 0], naive_depthwise(x, dw))
    assert np.allclose(nn.depthwise_separable_conv_forward(x, nn.ConvKernels(dw, pw)), composed, atol=1e-12)


def test_depthwise_shape_errors(rng):
    with pytest.raises(ShapeError):
        nn.depthwise_conv2d_forward(rng.normal(size=(1, 3, 2, 5)), rng.normal(size=(4, 1, 1, 3)))
    with pytest.raises(ShapeError):
        nn.pointwise_conv2d_forward(rng.normal(size=(1, 3, 2, 5)), rng.normal(size=(4, 2, 1, 1)))


def test_elu_examples():
    cfg = nn.ActivationConfig(1.0)
    assert nn.elu_forward(np.array(2.0), cfg) == 2.0
    assert nn.elu_forward(np.array(0.0), cfg) == 0.0
    assert abs(nn.elu_forward(np.array(-1.0), cfg) - (np.exp(-1) - 1)) < 1e-15
    assert abs(nn.elu_forward(np.array(-1.0), cfg) + 0.63212) < 1e-5


def test_elu_continuous_monotone():
    grid = np.linspace(-5, 5, 1000)
    y = nn.elu_forward(grid, nn.ActivationConfig(1.3))
    assert np.all(np.diff(y) > 0)
    assert abs(nn.elu_forward(np.array(1e-12)) - nn.elu_forward(np.array(-1e-12))) < 1e-11


def test_batchnorm_examples(rng):
    st = nn.BatchNormState.fresh(2)
    y, _ = nn.batchnorm_forward(np.full((4, 2, 1, 3), 5.0), st, True)
    assert not y.any()
    x = rng.normal(size=(16, 2, 1, 8))
    st = nn.BatchNormState.fresh(2)
    st.gamma[:] = 2.0
    st.beta[:] = 1.0
    y, _ = nn.batchnorm_forward(x, st, True)
    assert np.allclose(y.mean(axis=(0, 2, 3)), 1.0, atol=1e-6)
    assert np.allclose(y.std(axis=(0, 2, 3)), 2.0, atol=1e-4)  # epsilon shrinks std slightly
    st = nn.BatchNormState.fresh(2)
    y, _ = nn.batchnorm_forward(x, st, False)
    assert np.allclose(y, x / np.sqrt(1 + 1e-5), atol=1e-15)


def test_batchnorm_standardises(rng):
    x = rng.normal(3, 5, size=(8, 3, 2, 4))
    y, _ = nn.batchnorm_forward(x, nn.BatchNormState.fresh(3, epsilon=1e-12), True)
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-6)


def test_batchnorm_running_stats(rng):
    st = nn.BatchNormState.fresh(1)
    x = rng.normal(2, 3, size=(10, 1, 1, 5))
    nn.batchnorm_forward(x, st, True)
    assert np.allclose(st.running_mean, 0.1 * x.mean())
    assert np.allclose(st.running_var, 0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_single_item():
    y, _ = nn.batchnorm_forward(np.ones((1, 1, 1, 1)), nn.BatchNormState.fresh(1), True)
    assert np.all(np.isfinite(y)) and not y.any()


def test_avg_pool_examples():
    x = np.array([1.0, 3, 5, 7]).reshape(1, 1, 1, 4)
    assert np.array_equal(nn.avg_pool_forward(x, 2).ravel(), [2.0, 6.0])
    assert np.array_equal(nn.avg_pool_forward(np.full((1, 1, 1, 6), 4.0), 3).ravel(), [4.0, 4.0])
    assert np.array_equal(nn.avg_pool_forward(x, 1), x)
    with pytest.raises(ShapeError):
        nn.avg_pool_forward(x, 5)


def test_dense_examples(rng):
    x = rng.normal(size=3)
    assert np.array_equal(nn.dense_forward(x, np.eye(3), np.zeros(3)), x)
    assert np.array_equal(nn.dense_forward(x, np.zeros((2, 3)), np.array([1.0, 2.0])), [1.0, 2.0])
    w, b = rng.normal(size=(4, 3)), rng.normal(size=4)
    expected = [sum(w[i, j] * x[j] for j in range(3)) + b[i] for i in range(4)]
    assert np.allclose(nn.dense_forward(x, w, b), expected, atol=1e-14)
    with pytest.raises(ShapeError):
        nn.dense_forward(np.ones(2), w, b)


def test_softmax_examples():
    assert np.allclose(nn.softmax(np.zeros(2)), [0.5, 0.5])
    assert np.allclose(nn.softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])
    p = nn.softmax(np.log([1.0, 2.0, 3.0]))
    assert np.allclose(p, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_properties(logits, shift):
    z = np.array(logits)
    p = nn.softmax(z)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-12
    assert np.allclose(nn.softmax(z + shift), p, atol=1e-12)


def test_cross_entropy_examples(rng):
    assert nn.cross_entropy_loss(np.array([[0.0, 1.0]]), [1]) == 0.0
    assert abs(nn.cross_entropy_loss(np.full((3, 4), 0.25), [0, 1, 3]) - np.log(4)) < 1e-15
    logits = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    loss = lambda: nn.cross_entropy_loss(nn.softmax(logits), labels)
    analytic = nn.cross_entropy_grad(nn.softmax(logits), labels)
    assert np.max(np.abs(analytic - numeric_grad(loss, logits))) < 1e-6
    with pytest.raises(ShapeError):
        nn.cross_entropy_loss(np.full((1, 2), 0.5), [2])


def test_cross_entropy_zero_probability_clamped():
    assert np.isfinite(nn.cross_entropy_loss(np.array([[1.0, 0.0]]), [1]))


def test_mse_examples(rng):
    assert nn.mse_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert nn.mse_loss([1.0, 1.0], [0.0, 0.0]) == 1.0
    p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert np.isclose(nn.mse_loss(t + 2 * (p - t), t), 4 * nn.mse_loss(p, t))
    loss = lambda: nn.mse_loss(p, t)
    assert np.max(np.abs(nn.mse_grad(p, t) - numeric_grad(loss, p))) < 1e-8
    with pytest.raises(ShapeError):
        nn.mse_loss([1.0], [1.0, 2.0])


def test_dropout_examples(rng):
    x = rng.normal(size=(2, 3, 1, 4))
    assert np.array_equal(nn.dropout_forward(x, 0.0, True, 1), x)
    assert np.array_equal(nn.dropout_forward(x, 0.7, False, 1), x)
    big = np.ones((100, 10, 1, 100))
    y = nn.dropout_forward(big, 0.5, True, 3)
    assert abs(np.mean(y > 0) - 0.5) < 0.02
    assert abs(y.mean() - 1.0) < 0.02
    assert np.array_equal(y, nn.dropout_forward(big, 0.5, True, 3))


# layer-level gradient checks -------------------------------------------------


@pytest.mark.parametrize("kernel,d", [((1, 5), 2), ((3, 1), 2), ((2, 4), 1), ((1, 1), 3)])
def test_depthwise_layer_grad(rng, kernel, d):
    layer = nn.DepthwiseConv2d("dw", 2, d, kernel, rng)
    check_layer(layer, rng.normal(size=(2, 2, 3, 7)))


def test_depthwise_layer_skips_input_grad(rng):
    layer = nn.DepthwiseConv2d("dw", 1, 2, (1, 3), rng, input_grad=False)
    y = layer.forward(rng.normal(size=(2, 1, 2, 5)), True)
    assert layer.backward(np.ones_like(y)) is None
    assert layer.grads["weight"].shape == (2, 1, 1, 3)


def test_pointwise_layer_grad(rng):
    check_layer(nn.PointwiseConv2d("pw", 3, 4, rng), rng.normal(size=(2, 3, 2, 5)))


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_layer_grad(rng, training):
    layer = nn.BatchNorm("bn", 3)
    layer.params["gamma"][:] = rng.uniform(0.5, 2, 3)
    layer.params["beta"][:] = rng.normal(size=3)
    layer.buffers["running_var"][:] = rng.uniform(0.5, 2, 3)
    check_layer(layer, rng.normal(size=(4, 3, 2, 3)), training)


def test_elu_layer_grad(rng):
    x = rng.normal(size=(2, 2, 1, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    check_layer(nn.ELU("elu", 0.7), x)


def test_pool_layer_grad(rng):
    check_layer(nn.AvgPool("pool", 3), rng.normal(size=(2, 2, 1, 10)))


def test_dense_layer_grad(rng):
    check_layer(nn.Dense("fc", 5, 3, rng), rng.normal(size=(4, 5)))


def test_angle_softmax_flatten_grads(rng):
    check_layer(nn.AngleScale("angle"), rng.normal(size=(3, 4)))
    check_layer(nn.Softmax("softmax"), rng.normal(size=(3, 4)))
    check_layer(nn.Flatten("flat"), rng.normal(size=(2, 3, 1, 2)))


def test_dropout_layer_backward_uses_mask(rng):
    layer = nn.Dropout("drop", 0.5, seed=2)
    x = rng.normal(size=(4, 3, 1, 5))
    y = layer.forward(x, True)
    g = rng.normal(size=y.shape)
    mask = np.where(x != 0, y / x, 0)
    assert np.allclose(layer.backward(g), g * mask)
    assert np.array_equal(layer.forward(x, False), x)


def test_backward_before_forward():
    with pytest.raises(StateError):
        nn.Dense("fc", 2, 2).backward(np.ones((1, 2)))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), b=st.integers(1, 3), c=st.integers(1, 3),
       h=st.integers(1, 3), w=st.integers(2, 8), kw=st.integers(1, 5))
def test_random_shape_conv_grads(seed, b, c, h, w, kw):
    rng = np.random.default_rng(seed)
    kh = int(rng.integers(1, h + 1))
    check_layer(nn.DepthwiseConv2d("dw", c, 2, (kh, kw), rng), rng.normal(size=(b, c, h, w)))
    check_layer(nn.PointwiseConv2d("pw", c, 2, rng), rng.normal(size=(b, c, h, w)))
