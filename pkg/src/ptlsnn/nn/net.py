"""Sequential analog networks and the compact architecture-string notation.

An architecture string lists the input shape followed by one token per weight
layer, separated by dashes::

    28x28-c16s1-c32s2-c32s1-c64s2-800-10     # conv stack then dense head
    784-128-64-32-64-128-784                 # fully connected autoencoder

``cNsM`` is a 3x3 convolution with N filters and stride M (an optional ``kK``
suffix changes the kernel size; padding is ``K // 2``). Plain integers are
dense layers. Every hidden weight layer is followed by an optional batch norm
and a ReLU; the last weight layer is linear.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm, Conv2d, Dense, Layer, ReLU, ShapeError

_CONV_RE = re.compile(r"^c(\d+)s(\d+)(?:k(\d+))?$")
_INPUT_RE = re.compile(r"^(\d+)x(\d+)(?:x(\d+))?$")


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    stride: int
    kernel: int = 3

    def token(self):
        k = "" if self.kernel == 3 else f"k{self.kernel}"
        return f"c{self.channels}s{self.stride}{k}"


@dataclass(frozen=True)
class DenseSpec:
    units: int

    def token(self):
        return str(self.units)


def parse_architecture(arch: str):
    """Split an architecture string into ``(input_shape, [layer specs])``.

    ``input_shape`` is ``(C, H, W)`` for image inputs and ``(N,)`` for flat
    inputs.
    """
    tokens = [t.strip() for t in arch.strip().split("-") if t.strip()]
    if len(tokens) < 2:
        raise ValueError(f"architecture needs an input and at least one layer: {arch!r}")
    head = tokens[0].lower()
    m = _INPUT_RE.match(head)
    if m:
        h, w, c = int(m.group(1)), int(m.group(2)), int(m.group(3) or 1)
        input_shape = (c, h, w)
    elif head.isdigit():
        input_shape = (int(head),)
    else:
        raise ValueError(f"bad input token {tokens[0]!r}")
    specs = []
    for tok in tokens[1:]:
        tok = tok.lower()
        m = _CONV_RE.match(tok)
        if m:
            specs.append(ConvSpec(int(m.group(1)), int(m.group(2)), int(m.group(3) or 3)))
        elif tok.isdigit():
            specs.append(DenseSpec(int(tok)))
        else:
            raise ValueError(f"bad layer token {tok!r} in {arch!r}")
    sizes = list(input_shape) + [s.channels if isinstance(s, ConvSpec) else s.units for s in specs]
    if min(sizes) < 1 or any(isinstance(s, ConvSpec) and (s.stride < 1 or s.kernel < 1) for s in specs):
        raise ValueError(f"sizes, strides and kernels must be positive: {arch!r}")
    return input_shape, specs


def format_architecture(input_shape, specs) -> str:
    if len(input_shape) == 3:
        c, h, w = input_shape
        head = f"{h}x{w}" if c == 1 else f"{h}x{w}x{c}"
    else:
        head = str(input_shape[0])
    return "-".join([head] + [s.token() for s in specs])


class AnalogNet:
    """Ordered list of analog layers with whole-network forward/backward."""

    def __init__(self, layers: list[Layer], input_shape, output_activation=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.output_activation = output_activation
        self._check_shapes()

    @classmethod
    def from_architecture(cls, arch, batchnorm=True, seed=0, dtype=np.float32, output_activation=None):
        input_shape, specs = parse_architecture(arch)
        rng = np.random.Generator(np.random.Philox(seed))
        layers: list[Layer] = []
        shape = input_shape
        for i, spec in enumerate(specs):
            last = i == len(specs) - 1
            if isinstance(spec, ConvSpec):
                if len(shape) != 3:
                    raise ValueError("convolution after a dense layer is not supported")
                layer = Conv2d(shape[0], spec.channels, spec.kernel, spec.stride, spec.kernel // 2, rng=rng, dtype=dtype)
                features = spec.channels
            else:
                layer = Dense(int(np.prod(shape)), spec.units, rng=rng, dtype=dtype)
                features = spec.units
            layers.append(layer)
            shape = layer.output_shape(shape)
            if not last:
                if batchnorm:
                    layers.append(BatchNorm(features, dtype=dtype))
                layers.append(ReLU())
        return cls(layers, input_shape, output_activation=output_activation)

    def _check_shapes(self):
        shape = self.input_shape
        for layer in self.layers:
            if isinstance(layer, Dense) and int(np.prod(shape)) != layer.in_features:
                raise ShapeError(f"{layer!r} cannot follow shape {shape}")
            shape = layer.output_shape(shape)
        self.output_shape = shape

    @property
    def weight_layers(self) -> list[Layer]:
        return [l for l in self.layers if isinstance(l, (Dense, Conv2d))]

    def specs(self):
        out = []
        for layer in self.weight_layers:
            if isinstance(layer, Conv2d):
                out.append(ConvSpec(layer.out_channels, layer.stride, layer.kernel_size))
            else:
                out.append(DenseSpec(layer.out_features))
        return out

    @property
    def architecture(self) -> str:
        return format_architecture(self.input_shape, self.specs())

    def layer_shapes(self):
        """Input shape of every layer, in order."""
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shapes.append(shape)
            shape = layer.output_shape(shape)
        return shapes

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    __call__ = forward

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self):
        """``[(layer, name, array), ...]`` for every trainable parameter."""
        return [(layer, k, v) for layer in self.layers for k, v in layer.params.items()]

    def gradients(self):
        return [layer.grads[k] for layer in self.layers for k in layer.params]

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping of parameters and BN running statistics."""
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{i}.{k}"] = v
            if isinstance(layer, BatchNorm):
                out[f"{i}.running_mean"] = layer.running_mean
                out[f"{i}.running_var"] = layer.running_var
        return out

    def load_state_arrays(self, arrays):
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                layer.params[k] = np.array(arrays[f"{i}.{k}"], copy=True)
            if isinstance(layer, BatchNorm):
                layer.running_mean = np.array(arrays[f"{i}.running_mean"], copy=True)
                layer.running_var = np.array(arrays[f"{i}.running_var"], copy=True)

    def copy(self):
        import copy

        clone = copy.deepcopy(self)
        for layer in clone.layers:
            layer._cache = None
        return clone

    def predict(self, x, batch_size=256):
        outs = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0,) + tuple(self.output_shape))

    def macs(self):
        """Multiply-accumulate count of one inference (weight layers only, no bias adds)."""
        total, shape = 0, self.input_shape
        for layer in self.layers:
            if isinstance(layer, (Dense, Conv2d)):
                total += layer.macs(shape)
            shape = layer.output_shape(shape)
        return total

    def __repr__(self):
        return f"AnalogNet({self.architecture!r}, {len(self.layers)} layers)"
