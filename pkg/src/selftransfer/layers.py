"""Neural network layers with hand-written backward passes.

Every tensor is a numpy array laid out as (batch, channel, height, width).
The module exposes two levels:

* pure functions (``conv2d_forward``, ``maxpool_backward``, ...) that take
  everything they need as arguments, and
* small layer objects that own their parameters and cache what the backward
  pass needs.

Convolution is computed through a patch matrix (im2col) and one GEMM; the
nested-loop reference in the test suite is the normative definition.
Summation order is fixed, so repeated calls are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import ConfigError, InputError
from .rng import Rng


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    momentum: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


# ---------------------------------------------------------------------------
# convolution

def _check_conv(x, w, stride, pad, name):
    if x.ndim != 4:
        raise ConfigError(f"{name}: expected a 4-d input, got shape {x.shape}")
    if w.shape[1] != x.shape[1]:
        raise ConfigError(
            f"{name}: kernel expects {w.shape[1]} input channels, input has {x.shape[1]}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"{name}: stride must be >= 1 and pad >= 0")
    oh = conv_output_size(x.shape[2], w.shape[2], stride, pad)
    ow = conv_output_size(x.shape[3], w.shape[3], stride, pad)
    if oh < 1 or ow < 1:
        raise ConfigError(
            f"{name}: output would be {oh}x{ow} for input {x.shape[2]}x{x.shape[3]}")
    return oh, ow


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Patch matrix of shape (n*oh*ow, c*kh*kw), rows in (n, oh, ow) order."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :oh, :ow]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add a patch-matrix gradient back to an (n, c, h, w) tensor."""
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    d = np.ascontiguousarray(dcols.reshape(n, oh, ow, c, kh * kw))
    # accumulate channels-last so the innermost loop is contiguous along c
    dx = _kernels.col2im(d, h + 2 * pad, w + 2 * pad, kh, kw, stride)
    if pad:
        dx = dx[:, pad:pad + h, pad:pad + w, :]
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def conv2d_forward(x, w, b, stride=1, pad=0, name="conv", cols=None):
    oh, ow = _check_conv(x, w, stride, pad, name)
    n = x.shape[0]
    oc, _, kh, kw = w.shape
    if kh == kw == 1 and stride == 1 and pad == 0:
        return conv1x1_forward(x, w, b)
    if cols is None:
        cols = im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(oc, -1).T
    out += b
    return np.ascontiguousarray(out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, grad_out, stride=1, pad=0, cols=None):
    """Returns (grad_input, grad_weights, grad_bias)."""
    oc, _, kh, kw = w.shape
    expected = (x.shape[0], oc, conv_output_size(x.shape[2], kh, stride, pad),
                conv_output_size(x.shape[3], kw, stride, pad))
    if grad_out.shape != expected:
        raise RuntimeError(f"conv backward: grad shape {grad_out.shape} != {expected}")
    if kh == kw == 1 and stride == 1 and pad == 0:
        return conv1x1_backward(x, w, grad_out)
    if cols is None:
        cols = im2col(x, kh, kw, stride, pad)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, oc)
    gw = (g.T @ cols).reshape(w.shape)
    gb = g.sum(axis=0)
    dcols = g @ w.reshape(oc, -1)
    gx = col2im(dcols, x.shape, kh, kw, stride, pad)
    return gx, gw, gb


def conv1x1_forward(x, w, b):
    n, c, h, wd = x.shape
    k = w.shape[0]
    if w.shape[1] != c:
        raise ConfigError(f"conv1x1: kernel expects {w.shape[1]} channels, input has {c}")
    out = np.matmul(w.reshape(k, c), x.reshape(n, c, h * wd))
    out += b.reshape(1, k, 1)
    return out.reshape(n, k, h, wd)


def conv1x1_backward(x, w, grad_out):
    n, c, h, wd = x.shape
    k = w.shape[0]
    g = grad_out.reshape(n, k, h * wd)
    xs = x.reshape(n, c, h * wd)
    gw = np.zeros((k, c), dtype=x.dtype)
    for i in range(n):
        gw += g[i] @ xs[i].T
    gb = g.sum(axis=(0, 2))
    gx = np.matmul(w.reshape(k, c).T, g).reshape(x.shape)
    return gx, gw.reshape(w.shape), gb


# ---------------------------------------------------------------------------
# activations, pooling, dense

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad):
    return grad * (x > 0)


def maxpool_forward(x, kernel: int, stride: int):
    """Returns (out, argmax) with argmax the flat index inside each window.

    Window offsets are scanned in row-major order and only a strictly
    larger value replaces the running maximum, so ties go to the first
    index.
    """
    n, c, h, w = x.shape
    oh = conv_output_size(h, kernel, stride, 0)
    ow = conv_output_size(w, kernel, stride, 0)
    if oh < 1 or ow < 1:
        raise ConfigError(f"maxpool: window {kernel} does not fit input {h}x{w}")
    return _kernels.maxpool_forward(np.ascontiguousarray(x), kernel, stride, oh, ow)


def maxpool_backward(grad, argmax, x_shape, kernel: int, stride: int):
    return _kernels.maxpool_backward(np.ascontiguousarray(grad), argmax, x_shape[2], x_shape[3],
                                     kernel, stride)


def fully_connected_forward(x, w, b):
    """x is flattened per sample; returns (n, out, 1, 1)."""
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if flat.shape[1] != w.shape[1]:
        raise ConfigError(
            f"fully_connected: expects {w.shape[1]} inputs, got {flat.shape[1]}")
    out = flat @ w.T
    out += b
    return out.reshape(n, w.shape[0], 1, 1)


def fully_connected_backward(x, w, grad_out):
    n = x.shape[0]
    flat = x.reshape(n, -1)
    g = grad_out.reshape(n, w.shape[0])
    gx = (g @ w).reshape(x.shape)
    return gx, g.T @ flat, g.sum(axis=0)


def dropout_forward(x, rate: float, rng: Rng | None, train: bool):
    """Inverted dropout; returns (out, mask) with mask None in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("dropout in training mode needs a random stream")
    keep = rng.uniform(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(grad, mask):
    return grad if mask is None else grad * mask


def global_max_pool_forward(x):
    n, k, h, w = x.shape
    flat = x.reshape(n, k, h * w)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)
    return out.reshape(n, k, 1, 1), argmax


def global_max_pool_backward(grad, argmax, x_shape):
    n, k, h, w = x_shape
    dx = np.zeros((n, k, h * w), dtype=grad.dtype)
    np.put_along_axis(dx, argmax[..., None], grad.reshape(n, k, 1), axis=-1)
    return dx.reshape(x_shape)


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad, x_shape):
    n, k, h, w = x_shape
    g = grad.reshape(n, k, 1, 1) / grad.dtype.type(h * w)
    return np.broadcast_to(g, x_shape).copy()


# ---------------------------------------------------------------------------
# softmax loss

def softmax(logits):
    z = logits.reshape(logits.shape[0], -1)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits.reshape(logits.shape[0], -1)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def check_one_hot(targets, num_classes: int):
    t = np.asarray(targets)
    if t.ndim != 2 or t.shape[1] != num_classes:
        raise InputError(f"targets must have shape (n, {num_classes}), got {t.shape}")
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1)):
        raise InputError("targets must be one-hot rows")
    return t


def one_hot(labels, num_classes: int, dtype=np.float64):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy over the minibatch.

    Returns (loss, probs (n, K), grad_logits shaped like ``logits``), with
    ``grad_logits == (probs - targets) / n``.
    """
    n = logits.shape[0]
    k = int(np.prod(logits.shape[1:]))
    if k < 2:
        raise InputError("softmax cross-entropy needs at least two classes")
    t = check_one_hot(targets, k).astype(logits.dtype)
    logp = log_softmax(logits)
    loss = float(-(t * logp).sum() / n)
    probs = np.exp(logp)
    grad = ((probs - t) / logits.dtype.type(n)).reshape(logits.shape)
    return loss, probs, grad


# ---------------------------------------------------------------------------
# layer objects

class Layer:
    kind = "layer"
    params: list = []

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, name, in_channels, out_channels, kernel, stride=1, pad=0,
                 dtype=np.float32):
        self.name = name
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.weight = Param(f"{name}.weight",
                            np.zeros((out_channels, in_channels, kernel, kernel), dtype))
        self.bias = Param(f"{name}.bias", np.zeros(out_channels, dtype))
        self.params = [self.weight, self.bias]
        self._x = self._cols = None

    def forward(self, x, train=False):
        w = self.weight.value
        _check_conv(x, w, self.stride, self.pad, self.name)
        self._x = x
        if self.kernel == 1 and self.stride == 1 and self.pad == 0:
            self._cols = None
        else:
            self._cols = im2col(x, self.kernel, self.kernel, self.stride, self.pad)
        return conv2d_forward(x, w, self.bias.value, self.stride, self.pad,
                              self.name, cols=self._cols)

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(self._x, self.weight.value, grad, self.stride,
                                     self.pad, cols=self._cols)
        self.weight.grad[...] = gw
        self.bias.grad[...] = gb
        return gx

    def output_shape(self, shape):
        n, c, h, w = shape
        return (n, self.weight.value.shape[0],
                conv_output_size(h, self.kernel, self.stride, self.pad),
                conv_output_size(w, self.kernel, self.stride, self.pad))


class Conv1x1(Conv2d):
    kind = "conv1x1"

    def __init__(self, name, in_channels, out_channels, dtype=np.float32):
        super().__init__(name, in_channels, out_channels, 1, 1, 0, dtype)


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self.params = []
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return relu_forward(x)

    def backward(self, grad):
        return relu_backward(self._x, grad)

    @property
    def mask(self):
        return self._x > 0


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, kernel, stride):
        self.kernel, self.stride = kernel, stride
        self.params = []
        self._shape = self.argmax = None

    def forward(self, x, train=False):
        self._shape = x.shape
        out, self.argmax = maxpool_forward(x, self.kernel, self.stride)
        return out

    def backward(self, grad):
        return maxpool_backward(grad, self.argmax, self._shape, self.kernel, self.stride)

    def output_shape(self, shape):
        n, c, h, w = shape
        return (n, c, conv_output_size(h, self.kernel, self.stride, 0),
                conv_output_size(w, self.kernel, self.stride, 0))


class FullyConnected(Layer):
    kind = "fully_connected"

    def __init__(self, name, in_features, out_features, dtype=np.float32):
        self.name = name
        self.weight = Param(f"{name}.weight", np.zeros((out_features, in_features), dtype))
        self.bias = Param(f"{name}.bias", np.zeros(out_features, dtype))
        self.params = [self.weight, self.bias]
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return fully_connected_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad):
        gx, gw, gb = fully_connected_backward(self._x, self.weight.value, grad)
        self.weight.grad[...] = gw
        self.bias.grad[...] = gb
        return gx

    def output_shape(self, shape):
        return (shape[0], self.weight.value.shape[0], 1, 1)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate, rng: Rng | None = None):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.params = []
        self._mask = None

    def forward(self, x, train=False):
        out, self._mask = dropout_forward(x, self.rate, self.rng, train)
        return out

    def backward(self, grad):
        return dropout_backward(grad, self._mask)


class GlobalMaxPool(Layer):
    kind = "global_max_pool"

    def __init__(self):
        self.params = []
        self._shape = self.argmax = None

    def forward(self, x, train=False):
        self._shape = x.shape
        out, self.argmax = global_max_pool_forward(x)
        return out

    def backward(self, grad):
        return global_max_pool_backward(grad, self.argmax, self._shape)

    def output_shape(self, shape):
        return (shape[0], shape[1], 1, 1)


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def __init__(self):
        self.params = []
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return global_avg_pool_forward(x)

    def backward(self, grad):
        return global_avg_pool_backward(grad, self._shape)

    def output_shape(self, shape):
        return (shape[0], shape[1], 1, 1)
