"""Stateful layers built on :mod:`ops`.

A layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients in ``backward``. Composite modules expose
their parameters and buffers through ``named_parameters`` and
``named_buffers`` so optimisers and checkpoints can walk them in a fixed
order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        for name in ("grad", "adam_m", "adam_v"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.value))

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def accumulate(self, g):
        self.grad += g.astype(self.grad.dtype, copy=False)


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class: subclasses register children/parameters as attributes."""

    def named_parameters(self, prefix=""):
        for name, obj in vars(self).items():
            if isinstance(obj, Parameter):
                yield prefix + name, obj
            elif isinstance(obj, Module):
                yield from obj.named_parameters(prefix + name + ".")
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix=""):
        for name, obj in vars(self).items():
            if isinstance(obj, Module):
                yield from obj.named_buffers(prefix + name + ".")
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Cast parameter values (and gradient buffers) in place."""
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        return self


class Conv3(Module):
    """3-D convolution; ``input_grad=False`` skips dx for layers fed by data."""

    def __init__(self, cin, cout, k=3, stride=1, padding="same", rng=None, input_grad=True):
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding, self.input_grad = stride, padding, input_grad
        self.weight = Parameter(he_uniform(rng, (cout, cin, k, k, k), cin * k ** 3))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32))

    def forward(self, x, train=True):
        self._x = x
        return ops.conv3_forward(x, self.weight.value, self.bias.value, self.stride, self.padding)

    def backward(self, dy):
        dx, dw, db = ops.conv3_backward(
            dy, self._x, self.weight.value, self.stride, self.padding, need_dx=self.input_grad
        )
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class ConvT3(Module):
    def __init__(self, cin, cout, rng=None):
        rng = rng or np.random.default_rng(0)
        # each output voxel receives exactly cin contributions
        self.weight = Parameter(he_uniform(rng, (cin, cout, 2, 2, 2), cin))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32))

    def forward(self, x, train=True):
        self._x = x
        return ops.conv_transpose3_forward(x, self.weight.value, self.bias.value)

    def backward(self, dy):
        dx, dw, db = ops.conv_transpose3_backward(dy, self._x, self.weight.value)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class BatchNorm(Module):
    def __init__(self, channels):
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def named_buffers(self, prefix=""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def forward(self, x, train=True):
        y, self._cache = ops.batchnorm_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var, train
        )
        return y

    def backward(self, dy):
        dx, dg, db = ops.batchnorm_backward(dy, self.gamma.value, self._cache)
        self.gamma.accumulate(dg)
        self.beta.accumulate(db)
        return dx


class ReLU(Module):
    def forward(self, x, train=True):
        self._x = x
        return ops.relu(x)

    def backward(self, dy):
        return ops.relu_backward(dy, self._x)


class Sigmoid(Module):
    def forward(self, x, train=True):
        self._y = ops.sigmoid(x)
        return self._y

    def backward(self, dy):
        return ops.sigmoid_backward(dy, self._y)


class MaxPool2(Module):
    def forward(self, x, train=True):
        y, self._idx = ops.maxpool2_forward(x)
        return y

    def backward(self, dy):
        return ops.maxpool2_backward(dy, self._idx)


class Resize(Module):
    def __init__(self, out_dims=None):
        self.out_dims = out_dims

    def forward(self, x, train=True, out_dims=None):
        self._in_dims = x.shape[2:]
        return ops.resize_forward(x, out_dims or self.out_dims)

    def backward(self, dy):
        return ops.resize_backward(dy, self._in_dims)


class GlobalAvgPool(Module):
    def forward(self, x, train=True):
        self._shape = x.shape
        return x.mean(axis=(2, 3, 4))

    def backward(self, dy):
        N, C, D, H, W = self._shape
        g = dy / (D * H * W)
        return np.broadcast_to(g[:, :, None, None, None], self._shape).copy()


class Dense(Module):
    def __init__(self, cin, cout, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(he_uniform(rng, (cout, cin), cin))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32))

    def forward(self, x, train=True):
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dy):
        self.weight.accumulate(dy.T @ self._x)
        self.bias.accumulate(dy.sum(axis=0))
        return dy @ self.weight.value


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def conv_bn_relu(cin, cout, k=3, rng=None, input_grad=True):
    return Sequential(Conv3(cin, cout, k, rng=rng, input_grad=input_grad), BatchNorm(cout), ReLU())
