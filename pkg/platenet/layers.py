"""
Trainable layer primitives on numpy float64 arrays.

Image-like tensors are laid out as (batch, channels, height, width).
Each forward function returns an (output, cache) pair and the matching backward function consumes that cache.
"""
import dataclasses
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from platenet import PlatenetError


logger = logging.getLogger("platenet")

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ACTIVATIONS = ("relu", "none")


class LayerError(PlatenetError): pass

class ShapeError(LayerError): pass

class LabelError(LayerError): pass


@dataclasses.dataclass
class ShapeSpec:
    """
    Geometry of one sliding-window layer.
    Height fields default to the width fields for square kernels and inputs.
    """
    w_in: int
    w_k: int
    p: int = 0
    w_s: int = 1
    h_in: int = None
    h_k: int = None

    def __post_init__(self):
        if self.h_in is None:
            self.h_in = self.w_in
        if self.h_k is None:
            self.h_k = self.w_k


def _output_side(size, kernel, padding, stride):
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError("Invalid window geometry: kernel {}, stride {}, padding {}".format(kernel, stride, padding))
    numerator = size - kernel + 2 * padding
    if numerator < 0:
        raise ShapeError("Kernel {} does not fit an input of {} with padding {}".format(kernel, size, padding))
    # Trailing pixels that do not fill a whole stride are dropped
    return numerator // stride + 1


def output_shape(spec):
    """
    Return (w_out, h_out) of a sliding-window layer, flooring non-divisible strides.
    """
    w_out = _output_side(spec.w_in, spec.w_k, spec.p, spec.w_s)
    h_out = _output_side(spec.h_in, spec.h_k, spec.p, spec.w_s)
    return w_out, h_out


@dataclasses.dataclass
class ConvLayer:
    """
    2D convolution with optional batch normalization and ReLU, applied in that order.
    """
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    has_bn: bool = True
    activation: str = "relu"
    bn_scale: np.ndarray = None
    bn_shift: np.ndarray = None
    bn_running_mean: np.ndarray = None
    bn_running_var: np.ndarray = None
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError("Convolution kernel must have 4 dimensions, got shape {}".format(self.kernel.shape))
        if self.bias.shape != (self.out_channels,):
            raise ShapeError("Bias shape {} does not match {} output channels".format(self.bias.shape, self.out_channels))
        if self.activation not in ACTIVATIONS:
            raise LayerError("Unknown activation {!r}, expected one of {}".format(self.activation, ACTIVATIONS))
        channels = self.out_channels
        if self.has_bn:
            if self.bn_scale is None:
                self.bn_scale = np.ones(channels, dtype=DTYPE)
            if self.bn_shift is None:
                self.bn_shift = np.zeros(channels, dtype=DTYPE)
            if self.bn_running_mean is None:
                self.bn_running_mean = np.zeros(channels, dtype=DTYPE)
            if self.bn_running_var is None:
                self.bn_running_var = np.ones(channels, dtype=DTYPE)

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[1]

    @property
    def learnable_count(self):
        count = self.kernel.size + self.bias.size
        if self.has_bn:
            count += 2 * self.out_channels
        return count

    def parameters(self):
        params = {"kernel": self.kernel, "bias": self.bias}
        if self.has_bn:
            params["bn_scale"] = self.bn_scale
            params["bn_shift"] = self.bn_shift
        return params

    def state(self):
        if not self.has_bn:
            return {}
        return {"bn_running_mean": self.bn_running_mean, "bn_running_var": self.bn_running_var}


@dataclasses.dataclass
class FCLayer:
    """Fully connected layer, weights of shape (in_features, out_features)."""
    weights: np.ndarray
    bias: np.ndarray

    @property
    def learnable_count(self):
        return self.weights.size + self.bias.size

    def parameters(self):
        return {"weights": self.weights, "bias": self.bias}

    def state(self):
        return {}


def _check_mode(mode):
    if mode not in ("train", "infer"):
        raise LayerError("Unknown mode {!r}, expected 'train' or 'infer'".format(mode))


def batchnorm_forward(z, layer, mode):
    """
    Per-channel batch normalization of z with shape (N, C, H, W).
    Train mode normalizes with batch statistics and updates the running statistics of layer in place.
    """
    axes = (0, 2, 3)
    scale = layer.bn_scale[None, :, None, None]
    shift = layer.bn_shift[None, :, None, None]
    if mode == "train":
        mean = z.mean(axis=axes)
        var = z.var(axis=axes)
        momentum = layer.bn_momentum
        layer.bn_running_mean *= 1.0 - momentum
        layer.bn_running_mean += momentum * mean
        layer.bn_running_var *= 1.0 - momentum
        layer.bn_running_var += momentum * var
        inv_std = 1.0 / np.sqrt(var + layer.bn_eps)
        xhat = (z - mean[None, :, None, None]) * inv_std[None, :, None, None]
        cache = (xhat, inv_std, layer.bn_scale)
    else:
        inv_std = 1.0 / np.sqrt(layer.bn_running_var + layer.bn_eps)
        xhat = (z - layer.bn_running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        cache = None
    return scale * xhat + shift, cache


def batchnorm_backward(grad_output, cache):
    """Return (grad_z, grad_scale, grad_shift) for a train mode batchnorm_forward cache."""
    xhat, inv_std, scale = cache
    axes = (0, 2, 3)
    count = grad_output.shape[0] * grad_output.shape[2] * grad_output.shape[3]
    grad_shift = grad_output.sum(axis=axes)
    grad_scale = (grad_output * xhat).sum(axis=axes)
    dxhat = grad_output * scale[None, :, None, None]
    grad_z = (inv_std[None, :, None, None] / count) * (
        count * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return grad_z, grad_scale, grad_shift


def _windows(x, kernel_h, kernel_w, stride, out_h, out_w):
    # View of shape (N, C, out_h, out_w, kernel_h, kernel_w), no copy
    windows = sliding_window_view(x, (kernel_h, kernel_w), axis=(2, 3))
    return windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]


def conv_forward(layer, x, mode="train"):
    """
    Forward pass of a ConvLayer over x of shape (N, C, H, W).
    """
    _check_mode(mode)
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError("Convolution expects input (N, {}, H, W), got {}".format(layer.in_channels, x.shape))
    kernel_h, kernel_w = layer.kernel.shape[2:]
    spec = ShapeSpec(w_in=x.shape[3], w_k=kernel_w, p=layer.padding, w_s=layer.stride, h_in=x.shape[2], h_k=kernel_h)
    out_w, out_h = output_shape(spec)
    pad = layer.padding
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = _windows(padded, kernel_h, kernel_w, layer.stride, out_h, out_w)
    z = np.tensordot(windows, layer.kernel, axes=([1, 4, 5], [1, 2, 3]))
    z = z.transpose(0, 3, 1, 2) + layer.bias[None, :, None, None]
    cache = {"x_shape": x.shape, "windows": windows, "out_shape": z.shape, "mode": mode}
    out = z
    if layer.has_bn:
        out, cache["bn"] = batchnorm_forward(z, layer, mode)
    if layer.activation == "relu":
        mask = out > 0
        cache["relu_mask"] = mask
        out = out * mask
    return np.ascontiguousarray(out), cache


def conv_backward(layer, cache, grad_output):
    """
    Return (grad_input, grads) where grads maps parameter names of layer to gradients.
    """
    if cache["mode"] != "train":
        raise LayerError("Convolution backward requires a cache from a train mode forward pass")
    if grad_output.shape != cache["out_shape"]:
        raise ShapeError("Gradient shape {} does not match convolution output {}".format(grad_output.shape, cache["out_shape"]))
    grad = grad_output
    if "relu_mask" in cache:
        grad = grad * cache["relu_mask"]
    grads = {}
    if layer.has_bn:
        grad, grads["bn_scale"], grads["bn_shift"] = batchnorm_backward(grad, cache["bn"])
    grads["bias"] = grad.sum(axis=(0, 2, 3))
    windows = cache["windows"]
    grads["kernel"] = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
    # (N, out_h, out_w, C, kernel_h, kernel_w)
    columns = np.tensordot(grad, layer.kernel, axes=([1], [0]))
    n, c, h, w = cache["x_shape"]
    pad, stride = layer.padding, layer.stride
    kernel_h, kernel_w = layer.kernel.shape[2:]
    out_h, out_w = grad.shape[2:]
    grad_padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(kernel_h):
        for j in range(kernel_w):
            grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                columns[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    grad_input = grad_padded[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(grad_input), grads


def maxpool_forward(x, size, stride):
    """
    Max pooling over (N, C, H, W).
    The cache records the flat window index of each maximum, ties resolved to the first in row-major order.
    """
    if size < 1 or stride < 1:
        raise ShapeError("Pooling size and stride must be positive, got {} and {}".format(size, stride))
    if x.ndim != 4:
        raise ShapeError("Pooling expects input (N, C, H, W), got {}".format(x.shape))
    n, c, h, w = x.shape
    if size > h or size > w:
        raise ShapeError("Pooling window {} is larger than the input {}x{}".format(size, h, w))
    out_w, out_h = output_shape(ShapeSpec(w_in=w, w_k=size, w_s=stride, h_in=h))
    flat = _windows(x, size, size, stride, out_h, out_w).reshape(n, c, out_h, out_w, size * size)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    cache = {"x_shape": x.shape, "argmax": argmax, "size": size, "stride": stride}
    return out, cache


def maxpool_backward(cache, grad_output):
    argmax = cache["argmax"]
    if grad_output.shape != argmax.shape:
        raise ShapeError("Gradient shape {} does not match pooling output {}".format(grad_output.shape, argmax.shape))
    size, stride = cache["size"], cache["stride"]
    n, c = argmax.shape[:2]
    out_h, out_w = argmax.shape[2:]
    rows = (np.arange(out_h) * stride)[None, None, :, None] + argmax // size
    cols = (np.arange(out_w) * stride)[None, None, None, :] + argmax % size
    batch_index = np.arange(n)[:, None, None, None]
    channel_index = np.arange(c)[None, :, None, None]
    grad_input = np.zeros(cache["x_shape"], dtype=DTYPE)
    # Overlapping windows may route several gradients to one position
    np.add.at(grad_input, (batch_index, channel_index, rows, cols), grad_output)
    return grad_input


def fc_forward(weights, bias, x):
    """
    Affine map of x flattened to (N, in_features).
    """
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weights.shape[0]:
        raise ShapeError("Fully connected layer expects {} input features, got {}".format(weights.shape[0], flat.shape[1]))
    out = flat @ weights + bias
    return out, (x.shape, flat, weights)


def fc_backward(cache, grad_output):
    """Return (grad_input, grad_weights, grad_bias)."""
    x_shape, flat, weights = cache
    if grad_output.shape != (flat.shape[0], weights.shape[1]):
        raise ShapeError("Gradient shape {} does not match fully connected output {}".format(
            grad_output.shape, (flat.shape[0], weights.shape[1])))
    grad_weights = flat.T @ grad_output
    grad_bias = grad_output.sum(axis=0)
    grad_input = (grad_output @ weights.T).reshape(x_shape)
    return grad_input, grad_weights, grad_bias


def softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def softmax_backward(probabilities, grad_output):
    """Vector-Jacobian product of a softmax over the last axis."""
    inner = (probabilities * grad_output).sum(axis=-1, keepdims=True)
    return probabilities * (grad_output - inner)


def softmax_cross_entropy(logits, labels):
    """
    Cross-entropy of softmax(logits) against integer class labels.
    A 1-D logits vector takes a single label; a (N, K) batch takes N labels and the loss and gradient are averaged over the batch.
    Return (loss, grad_logits).
    """
    single = logits.ndim == 1
    batch = logits[None, :] if single else logits
    labels = np.atleast_1d(np.asarray(labels))
    num_classes = batch.shape[1]
    if labels.shape != (batch.shape[0],):
        raise ShapeError("Expected {} labels, got {}".format(batch.shape[0], labels.shape))
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise LabelError("Labels {} out of range for {} classes".format(labels.tolist(), num_classes))
    shifted = batch - batch.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch.shape[0])
    losses = log_norm - shifted[rows, labels]
    grad = softmax(batch, axis=1)
    grad[rows, labels] -= 1.0
    grad /= batch.shape[0]
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad
