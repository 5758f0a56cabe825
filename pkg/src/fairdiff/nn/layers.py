"""Dense and convolutional layers with seeded fan-in initialisation."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Parameter, ShapeError, Tensor


def forward_dense(x, weights, bias):
    """Affine map ``x @ W + b`` over the last axis of ``x``."""
    x = ag.as_tensor(x)
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(
            f"dense: input shape {x.shape} does not match weight shape {weights.shape}")
    return ag.add(ag.matmul(x, weights), bias)


def forward_conv2d(x, kernel, bias, stride=1, padding=0):
    """Convolution accepting either (C, H, W) or (N, C, H, W) input."""
    x = ag.as_tensor(x)
    if x.ndim == 3:
        out = ag.conv2d(ag.reshape(x, (1,) + x.shape), kernel, bias, stride, padding)
        return ag.reshape(out, out.shape[1:])
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected (C,H,W) or (N,C,H,W) input, got {x.shape}")
    return ag.conv2d(x, kernel, bias, stride, padding)


def sinusoidal_embed(t, dim):
    """Interleaved ``[sin(t f_0), cos(t f_0), sin(t f_1), ...]`` with geometric frequencies.

    ``t`` may be a scalar or a 1-D array of timesteps; the result has a trailing
    axis of length ``dim``.
    """
    if dim % 2:
        raise ValueError(f"embedding width must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("timesteps must be non-negative")
    freqs = 10000.0 ** (-np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


class Module:
    """Container that discovers parameters held in attributes, lists and sub-modules."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            _collect(val, f"{prefix}{key}", out)
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def freeze(self):
        for p in self.parameters():
            p.frozen = True
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.frozen = False
        return self

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state, strict=True):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _collect(val, name, out):
    if isinstance(val, Parameter):
        out[name] = val
    elif isinstance(val, Module):
        out.update(val.named_parameters(prefix=name + "."))
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            _collect(v, f"{name}.{i}", out)


def kaiming(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Dense(Module):
    def __init__(self, n_in, n_out, rng=None, zero=False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = kaiming(rng, (n_in, n_out), n_in)
        self.weight = Parameter(w, name="weight")
        self.bias = Parameter(np.zeros(n_out), name="bias")

    def __call__(self, x):
        return forward_dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k=3, stride=1, padding=None, rng=None, zero=False):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (c_out, c_in, k, k)
        w = np.zeros(shape) if zero else kaiming(rng, shape, c_in * k * k)
        self.weight = Parameter(w, name="weight")
        self.bias = Parameter(np.zeros(c_out), name="bias")

    def __call__(self, x):
        return forward_conv2d(x, self.weight, self.bias, self.stride, self.padding)


def zero_conv(channels_in, channels_out=None):
    """1x1 convolution whose weights and bias start at exactly zero."""
    return Conv2d(channels_in, channels_out or channels_in, k=1, padding=0, zero=True)


def mse(pred, target):
    diff = ag.sub(pred, target)
    return ag.mean(ag.square(diff))


def as_input(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
