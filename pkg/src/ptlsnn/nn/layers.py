"""Analog layers with cached forward passes and exact reverse-mode gradients.

Every layer follows the same protocol:

- ``forward(x, train=False)`` computes the output and caches what the
  backward pass needs.
- ``backward(grad_out)`` returns the gradient w.r.t. the input and stores
  parameter gradients in ``self.grads`` (same keys as ``self.params``).

Dense layers flatten any trailing dimensions of their input, so a dense layer
placed after a convolution needs no explicit flatten layer.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Input does not match the layer's declared fan-in."""


class ConfigError(ValueError):
    """Layer hyper-parameters produce an invalid configuration."""


class StateError(RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _require_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a cached forward pass")
        return self._cache

    def __call__(self, x, train=False):
        return self.forward(x, train=train)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in, dtype=np.float32):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Dense(Layer):
    """Fully connected layer, ``out = x @ W.T + b`` with ``W`` of shape (out, in)."""

    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = kaiming_uniform(rng, (self.out_features, self.in_features), self.in_features, dtype)
        bound = 1.0 / math.sqrt(self.in_features)
        self.params["b"] = rng.uniform(-bound, bound, size=self.out_features).astype(dtype)

    @property
    def W(self):
        return self.params["W"]

    @property
    def b(self):
        return self.params["b"]

    def _flat(self, x):
        x = np.asarray(x)
        flat = x.reshape(x.shape[0], -1) if x.ndim != 1 else x[None, :]
        if flat.shape[1] != self.in_features:
            raise ShapeError(f"dense expects fan-in {self.in_features}, got {flat.shape[1]}")
        return flat

    def linear(self, x, W=None, b=None):
        """``x @ W.T (+ b)`` with explicit weights; no caching, no default bias.

        Used by the spiking simulator, which feeds shared (possibly quantized)
        weights and injects the bias separately as a per-step current.
        """
        flat = self._flat(x)
        out = flat @ (self.W if W is None else W).T
        return out if b is None else out + b

    def forward(self, x, train=False):
        x = np.asarray(x)
        flat = self._flat(x)
        self._cache = (flat, x.shape)
        out = flat @ self.W.T + self.b
        return out[0] if x.ndim == 1 else out

    def backward(self, grad_out):
        flat, in_shape = self._require_cache()
        g = grad_out.reshape(flat.shape[0], self.out_features)
        self.grads["W"] = g.T @ flat
        self.grads["b"] = g.sum(axis=0)
        return (g @ self.W).reshape(in_shape)

    def backward_input_free(self, grad_out, x):
        """Parameter gradients for an explicit input, leaving the cache untouched."""
        flat = self._flat(x)
        g = grad_out.reshape(flat.shape[0], self.out_features)
        return {"W": g.T @ flat, "b": g.sum(axis=0)}

    def fan_out_per_input(self):
        return self.out_features

    def macs(self, in_shape=None):
        return self.in_features * self.out_features

    def output_shape(self, in_shape):
        return (self.out_features,)

    def __repr__(self):
        return f"Dense({self.in_features}, {self.out_features})"


def _im2col(x, k, stride, pad):
    """(B, C, H, W) -> columns of shape (B*Ho*Wo, C*k*k)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    B, C, H, W = x.shape
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    sb, sc, sh, sw = x.strides
    win = as_strided(
        x,
        shape=(B, Ho, Wo, C, k, k),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return win.reshape(B * Ho * Wo, C * k * k), Ho, Wo


def _col2im(cols, x_shape, k, stride, pad, Ho, Wo):
    B, C, H, W = x_shape
    cols = cols.reshape(B, Ho, Wo, C, k, k)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


class Conv2d(Layer):
    """2-D cross-correlation (no kernel flip) over CHW inputs batched as BCHW."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1, rng=None, dtype=np.float32):
        super().__init__()
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ConfigError(f"invalid conv config k={kernel_size} s={stride} p={padding}")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = self.in_channels * self.kernel_size**2
        self.params["W"] = kaiming_uniform(
            rng, (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size), fan_in, dtype
        )
        bound = 1.0 / math.sqrt(fan_in)
        self.params["b"] = rng.uniform(-bound, bound, size=self.out_channels).astype(dtype)

    @property
    def W(self):
        return self.params["W"]

    @property
    def b(self):
        return self.params["b"]

    def output_shape(self, in_shape):
        C, H, W = in_shape
        if C != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {C}")
        Ho = conv_output_size(H, self.kernel_size, self.stride, self.padding)
        Wo = conv_output_size(W, self.kernel_size, self.stride, self.padding)
        if Ho <= 0 or Wo <= 0:
            raise ConfigError(f"conv produces non-positive output size {Ho}x{Wo} from {H}x{W}")
        return (self.out_channels, Ho, Wo)

    def _check(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4:
            raise ShapeError(f"conv expects CHW or BCHW input, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        return x

    def linear(self, x, W=None, b=None):
        x = self._check(x)
        W = self.W if W is None else W
        cols, Ho, Wo = _im2col(x, self.kernel_size, self.stride, self.padding)
        out = cols @ W.reshape(self.out_channels, -1).T
        if b is not None:
            out = out + b
        return out.reshape(x.shape[0], Ho, Wo, self.out_channels).transpose(0, 3, 1, 2)

    def forward(self, x, train=False):
        x_in = np.asarray(x)
        x = self._check(x_in)
        cols, Ho, Wo = _im2col(x, self.kernel_size, self.stride, self.padding)
        self._cache = (cols, x.shape, Ho, Wo, x_in.ndim)
        out = cols @ self.W.reshape(self.out_channels, -1).T + self.b
        out = out.reshape(x.shape[0], Ho, Wo, self.out_channels).transpose(0, 3, 1, 2)
        return out[0] if x_in.ndim == 3 else out

    def _param_grads(self, g, cols):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        return g2, {"W": (g2.T @ cols).reshape(self.W.shape), "b": g2.sum(axis=0)}

    def backward(self, grad_out):
        cols, x_shape, Ho, Wo, ndim = self._require_cache()
        g = grad_out[None] if grad_out.ndim == 3 else grad_out
        g2, grads = self._param_grads(g, cols)
        self.grads.update(grads)
        dcols = g2 @ self.W.reshape(self.out_channels, -1)
        dx = _col2im(dcols, x_shape, self.kernel_size, self.stride, self.padding, Ho, Wo)
        return dx[0] if ndim == 3 else dx

    def backward_input_free(self, grad_out, x):
        x = self._check(x)
        cols, _, _ = _im2col(x, self.kernel_size, self.stride, self.padding)
        return self._param_grads(grad_out, cols)[1]

    def macs(self, in_shape):
        C, Ho, Wo = self.output_shape(in_shape)
        return C * Ho * Wo * self.in_channels * self.kernel_size**2

    def __repr__(self):
        return (
            f"Conv2d({self.in_channels}, {self.out_channels}, k={self.kernel_size}, "
            f"s={self.stride}, p={self.padding})"
        )


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        x = np.asarray(x)
        self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        return grad_out * self._require_cache()

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def __repr__(self):
        return "ReLU()"


def relu_apply(x):
    return np.maximum(np.asarray(x), 0)


class BatchNorm(Layer):
    """Batch normalization over the feature axis (axis 1) of (B, F) or (B, C, H, W) inputs.

    Training mode normalizes with the batch statistics (biased variance) and
    updates the running estimates by exponential moving average; inference
    mode uses the running estimates.
    """

    kind = "batchnorm"

    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        if eps < 0:
            raise ConfigError("batchnorm eps must be non-negative")
        self.num_features = int(num_features)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.params["gamma"] = np.ones(self.num_features, dtype=dtype)
        self.params["beta"] = np.zeros(self.num_features, dtype=dtype)
        self.running_mean = np.zeros(self.num_features, dtype=dtype)
        self.running_var = np.ones(self.num_features, dtype=dtype)

    @property
    def gamma(self):
        return self.params["gamma"]

    @property
    def beta(self):
        return self.params["beta"]

    def _axes(self, x):
        if x.shape[1] != self.num_features:
            raise ShapeError(f"batchnorm expects {self.num_features} features, got {x.shape[1]}")
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, x, train=False):
        x = np.asarray(x)
        axes = self._axes(x)
        if train:
            n = x.size // self.num_features
            if x.shape[0] < 2:
                raise ValueError("batchnorm training mode needs batch size >= 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
            unbiased = var * n / max(n - 1, 1)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv_std, x)
        self._cache = (xhat, inv_std, axes, train)
        return xhat * self._bcast(self.gamma, x) + self._bcast(self.beta, x)

    def backward(self, grad_out):
        xhat, inv_std, axes, train = self._require_cache()
        g = grad_out
        self.grads["gamma"] = (g * xhat).sum(axis=axes)
        self.grads["beta"] = g.sum(axis=axes)
        dxhat = g * self._bcast(self.gamma, g)
        if not train:
            return dxhat * self._bcast(inv_std, g)
        n = g.size // self.num_features
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        return (
            self._bcast(inv_std / n, g)
            * (n * dxhat - self._bcast(s1, g) - xhat * self._bcast(s2, g))
        )

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def __repr__(self):
        return f"BatchNorm({self.num_features})"
