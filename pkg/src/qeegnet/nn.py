"""Classical layers with hand-written forward and backward passes.

Tensors are float64 numpy arrays laid out ``[batch, channels, height, width]``;
for EEG input that is ``[batch, 1, C, T]``.  Convolutions use "same" zero
padding along width (time) and "valid" along height (electrodes), the usual
EEGNet layout.  With an even kernel the extra pad column goes on the right.

Each layer object keeps whatever its backward pass needs from the last
forward call, exposes trainable tensors in ``params`` and their gradients in
``grads`` under the same keys, and non-trainable state in ``buffers``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ShapeError, StateError

LOG_EPS = 1e-12


# ---------------------------------------------------------------------------
# functional kernels


def same_padding(k: int) -> tuple[int, int]:
    return (k - 1) // 2, k // 2


def _check4(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D [batch, channels, height, width], got {x.shape}")


def depthwise_conv2d_forward(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Grouped convolution with one group per input channel.

    ``w`` has shape ``[in_channels * D, 1, kH, kW]``; output channel ``o``
    reads input channel ``o // D``.  Returns the output and a backward cache.
    """
    _check4(x)
    b, cin, h, width = x.shape
    cout, one, kh, kw = w.shape
    if one != 1 or cout % cin:
        raise ShapeError(f"depthwise kernel {w.shape} incompatible with {cin} input channels")
    if kh > h:
        raise ShapeError(f"kernel height {kh} exceeds input height {h}")
    d = cout // cin
    left, right = same_padding(kw)
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (left, right)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [b, cin, ho, width, kh, kw]
    wg = w[:, 0].reshape(cin, d, kh, kw)
    out = np.einsum("bchwij,cdij->bcdhw", win, wg, optimize=True)
    ho = h - kh + 1
    return out.reshape(b, cout, ho, width), (x.shape, win, wg, left)


def depthwise_conv2d_backward(grad: np.ndarray, cache: tuple, need_input: bool = True):
    x_shape, win, wg, left = cache
    b, cin, h, width = x_shape
    _, d, kh, kw = wg.shape
    ho = h - kh + 1
    g = grad.reshape(b, cin, d, ho, width)
    dw = np.einsum("bchwij,bcdhw->cdij", win, g, optimize=True).reshape(cin * d, 1, kh, kw)
    if not need_input:
        return None, dw
    dxp = np.zeros((b, cin, h, width + kw - 1))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho, j:j + width] += np.einsum("bcdhw,cd->bchw", g, wg[:, :, i, j])
    return dxp[:, :, :, left:left + width], dw


def pointwise_conv2d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """1x1 convolution; ``w`` is ``[out, in, 1, 1]``."""
    _check4(x)
    if w.shape[1] != x.shape[1] or w.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise kernel {w.shape} incompatible with input {x.shape}")
    return np.einsum("bchw,oc->bohw", x, w[:, :, 0, 0], optimize=True)


def pointwise_conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx = np.einsum("bohw,oc->bchw", grad, w[:, :, 0, 0], optimize=True)
    dw = np.einsum("bohw,bchw->oc", grad, x, optimize=True)[:, :, None, None]
    return dx, dw


@dataclass
class ConvKernels:
    depthwise: np.ndarray  # [channels * D, 1, kH, kW]
    pointwise: np.ndarray  # [out, channels * D, 1, 1]


def depthwise_separable_conv_forward(x: np.ndarray, kernels: ConvKernels) -> np.ndarray:
    mid, _ = depthwise_conv2d_forward(x, kernels.depthwise)
    return pointwise_conv2d_forward(mid, kernels.pointwise)


@dataclass
class ActivationConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError(f"ELU alpha must be positive, got {self.alpha}")


def elu_forward(x: np.ndarray, cfg: ActivationConfig = ActivationConfig()) -> np.ndarray:
    return np.where(x > 0, x, cfg.alpha * np.expm1(np.minimum(x, 0.0)))


def elu_backward(grad: np.ndarray, x: np.ndarray, cfg: ActivationConfig = ActivationConfig()) -> np.ndarray:
    return grad * np.where(x > 0, 1.0, cfg.alpha * np.exp(np.minimum(x, 0.0)))


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
                   momentum, epsilon)


def batchnorm_forward(x: np.ndarray, state: BatchNormState, training: bool):
    """Per-channel normalisation over (batch, height, width).

    Training mode updates ``state``'s running statistics in place (unbiased
    variance, as in PyTorch).  Returns the output and a backward cache.
    """
    _check4(x)
    if x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batch norm over {state.gamma.shape[0]} channels got input {x.shape}")
    axes = (0, 2, 3)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[1]
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var * (n / max(n - 1, 1))
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = state.gamma[None, :, None, None] * xhat + state.beta[None, :, None, None]
    return y, (xhat, inv_std, training)


def batchnorm_backward(grad: np.ndarray, cache: tuple, state: BatchNormState):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, training = cache
    axes = (0, 2, 3)
    dgamma = (grad * xhat).sum(axis=axes)
    dbeta = grad.sum(axis=axes)
    dxhat = grad * state.gamma[None, :, None, None]
    if not training:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    n = grad.size // grad.shape[1]
    dx = (inv_std[None, :, None, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=axes)[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
    )
    return dx, dgamma, dbeta


def avg_pool_forward(x: np.ndarray, pool: int) -> np.ndarray:
    """Non-overlapping mean over width windows of ``pool``; a ragged tail is dropped."""
    _check4(x)
    b, c, h, width = x.shape
    if pool < 1 or pool > width:
        raise ShapeError(f"pool window {pool} invalid for width {width}")
    wo = width // pool
    return x[..., : wo * pool].reshape(b, c, h, wo, pool).mean(axis=-1)


def avg_pool_backward(grad: np.ndarray, input_width: int, pool: int) -> np.ndarray:
    b, c, h, wo = grad.shape
    dx = np.zeros((b, c, h, input_width))
    dx[..., : wo * pool] = np.repeat(grad / pool, pool, axis=-1)
    return dx


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ W.T + b`` for a vector or a ``[batch, in]`` matrix; ``W`` is ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"dense layer expects {weight.shape[1]} inputs, got {x.shape[-1]}")
    return x @ weight.T + bias


def dense_backward(grad: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Returns (dx, dW, db) for batched input."""
    return grad @ weight, grad.T @ x, grad.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (grad - (grad * probs).sum(axis=-1, keepdims=True))


def _check_labels(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != probs.shape[:1]:
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {probs.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ShapeError(f"labels must lie in [0, {probs.shape[1]})")
    return labels


def cross_entropy_loss(probs: np.ndarray, labels) -> float:
    labels = _check_labels(probs, labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.clip(picked, LOG_EPS, None))))


def cross_entropy_grad(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the pre-softmax logits."""
    labels = _check_labels(probs, labels)
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - target) / pred.size


def one_hot(labels, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dropout_forward(x: np.ndarray, rate: float, training: bool, rng_seed: int = 0) -> np.ndarray:
    if not 0 <= rate < 1:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    return x * dropout_mask(x.shape, rate, np.random.default_rng(rng_seed))


# ---------------------------------------------------------------------------
# layer objects


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def config(self) -> dict:
        """Constructor arguments, for architecture descriptors."""
        return {}

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called without a preceding forward")
        return self._cache

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class DepthwiseConv2d(Layer):
    kind = "depthwise_conv"

    def __init__(self, name, in_channels: int, depth_multiplier: int, kernel: tuple[int, int],
                 rng: np.random.Generator | None = None, input_grad: bool = True):
        super().__init__(name)
        self.in_channels, self.depth_multiplier = in_channels, depth_multiplier
        self.kernel = tuple(kernel)
        self.input_grad = input_grad
        kh, kw = self.kernel
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(kh * kw)
        self.params["weight"] = rng.uniform(-bound, bound, (in_channels * depth_multiplier, 1, kh, kw))

    def config(self):
        return {"in_channels": self.in_channels, "depth_multiplier": self.depth_multiplier,
                "kernel": list(self.kernel)}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {c}")
        if self.kernel[0] > h:
            raise ShapeError(f"kernel height {self.kernel[0]} exceeds input height {h}")
        return (c * self.depth_multiplier, h - self.kernel[0] + 1, w)

    def forward(self, x, training):
        y, self._cache = depthwise_conv2d_forward(x, self.params["weight"])
        return y

    def backward(self, grad):
        dx, dw = depthwise_conv2d_backward(grad, self._cached(), need_input=self.input_grad)
        self.grads["weight"] = dw
        return dx


class PointwiseConv2d(Layer):
    kind = "pointwise_conv"

    def __init__(self, name, in_channels: int, out_channels: int, rng: np.random.Generator | None = None):
        super().__init__(name)
        self.in_channels, self.out_channels = in_channels, out_channels
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_channels)
        self.params["weight"] = rng.uniform(-bound, bound, (out_channels, in_channels, 1, 1))

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {c}")
        return (self.out_channels, h, w)

    def forward(self, x, training):
        self._cache = x
        return pointwise_conv2d_forward(x, self.params["weight"])

    def backward(self, grad):
        dx, dw = pointwise_conv2d_backward(grad, self._cached(), self.params["weight"])
        self.grads["weight"] = dw
        return dx


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        super().__init__(name)
        self.state = BatchNormState.fresh(channels, momentum, epsilon)
        # share storage so checkpoint loads write through to the state
        self.params = {"gamma": self.state.gamma, "beta": self.state.beta}
        self.buffers = {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def config(self):
        return {"channels": int(self.state.gamma.shape[0]), "momentum": self.state.momentum,
                "epsilon": self.state.epsilon}

    def output_shape(self, in_shape):
        if in_shape[0] != self.state.gamma.shape[0]:
            raise ShapeError(f"expected {self.state.gamma.shape[0]} channels, got {in_shape[0]}")
        return in_shape

    def forward(self, x, training):
        y, self._cache = batchnorm_forward(x, self.state, training)
        return y

    def backward(self, grad):
        dx, dg, db = batchnorm_backward(grad, self._cached(), self.state)
        self.grads["gamma"], self.grads["beta"] = dg, db
        return dx


class ELU(Layer):
    kind = "elu"

    def __init__(self, name, alpha: float = 1.0):
        super().__init__(name)
        self.act = ActivationConfig(alpha)

    def config(self):
        return {"alpha": self.act.alpha}

    def forward(self, x, training):
        self._cache = x
        return elu_forward(x, self.act)

    def backward(self, grad):
        return elu_backward(grad, self._cached(), self.act)


class AvgPool(Layer):
    kind = "avgpool"

    def __init__(self, name, pool: int):
        super().__init__(name)
        self.pool = pool

    def config(self):
        return {"pool": self.pool}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if self.pool < 1 or self.pool > w:
            raise ShapeError(f"pool window {self.pool} exceeds width {w}")
        return (c, h, w // self.pool)

    def forward(self, x, training):
        self._cache = x.shape[-1]
        return avg_pool_forward(x, self.pool)

    def backward(self, grad):
        return avg_pool_backward(grad, self._cached(), self.pool)


class Dropout(Layer):
    """Inverted dropout drawing masks from its own generator.

    The generator state is part of the training state so that resumed runs
    draw the same masks.
    """

    kind = "dropout"

    def __init__(self, name, rate: float = 0.25, seed: int = 0):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)

    def config(self):
        return {"rate": self.rate}

    def forward(self, x, training):
        if not training or self.rate == 0:
            self._cache = None
            return x
        self._cache = dropout_mask(x.shape, self.rate, self.rng)
        return x * self._cache

    def backward(self, grad):
        return grad if self._cache is None else grad * self._cache


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cached())


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.params["weight"] = rng.uniform(-bound, bound, (out_features, in_features))
        self.params["bias"] = rng.uniform(-bound, bound, out_features)

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"expected ({self.in_features},) features, got {in_shape}")
        return (self.out_features,)

    def forward(self, x, training):
        self._cache = x
        return dense_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, grad):
        dx, dw, db = dense_backward(grad, self._cached(), self.params["weight"])
        self.grads["weight"], self.grads["bias"] = dw, db
        return dx


class AngleScale(Layer):
    """``pi * tanh(x)``: squashes embedding outputs into rotation angles."""

    kind = "angle_scale"

    def forward(self, x, training):
        t = np.tanh(x)
        self._cache = t
        return np.pi * t

    def backward(self, grad):
        t = self._cached()
        return grad * np.pi * (1.0 - t * t)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, grad):
        return softmax_backward(grad, self._cached())


@dataclass
class LayerSpec:
    """Row of an architecture summary."""

    name: str
    kind: str
    output_shape: tuple
    n_params: int
    config: dict = field(default_factory=dict)
