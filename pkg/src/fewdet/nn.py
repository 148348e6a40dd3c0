"""Parameters, layers and the SGD optimizer."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, linear


class Parameter:
    """A named trainable tensor with an optional momentum buffer."""

    __slots__ = ("name", "tensor", "momentum_buffer")

    def __init__(self, name, data, dtype=None):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True, dtype=dtype)
        self.momentum_buffer = None

    @property
    def data(self):
        return self.tensor.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def he_normal(rng, shape, fan_in, dtype):
    """Fan-in scaled Gaussian init, std = sqrt(2 / fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


_BLAS_CACHE = {}


def _axpy_funcs(dtype):
    key = np.dtype(dtype).str
    funcs = _BLAS_CACHE.get(key)
    if funcs is None:
        from scipy.linalg.blas import get_blas_funcs

        funcs = get_blas_funcs(("axpy", "scal"), (np.empty(0, dtype=dtype),))
        _BLAS_CACHE[key] = funcs
    return funcs


def sgd_step(params, lr, momentum=0.9, weight_decay=1e-4):
    """One SGD update with momentum and weight decay; zeroes grads after.

    Update rule (per parameter): g <- grad + wd * p;
    buf <- momentum * buf + g; p <- p - lr * buf.  In-place BLAS keeps the
    large head matrices cheap.
    """
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        data = p.tensor.data
        g = np.ascontiguousarray(g, dtype=data.dtype).reshape(-1)
        axpy, scal = _axpy_funcs(data.dtype)
        flat = data.reshape(-1)
        if momentum:
            if p.momentum_buffer is None:
                p.momentum_buffer = np.zeros_like(data)
            buf = p.momentum_buffer.reshape(-1)
            scal(momentum, buf)
            axpy(g, buf, a=1.0)
            if weight_decay:
                axpy(flat, buf, a=weight_decay)
            axpy(buf, flat, a=-lr)
        else:
            if weight_decay:
                axpy(flat, g, a=weight_decay)
            axpy(g, flat, a=-lr)
        p.tensor.grad = None


def zero_grads(params):
    for p in params:
        p.tensor.grad = None


class Conv2d:
    """3x3-style convolution layer owning weight and bias parameters."""

    def __init__(self, name, c_in, c_out, kernel, rng, stride=1, padding=0, dtype=np.float64, bias=True):
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            f"{name}.weight", he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel, dtype)
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=dtype)) if bias else None
        if not bias:
            self._zero_bias = Tensor(np.zeros(c_out, dtype=dtype))

    def __call__(self, x, strict=False):
        b = self.bias.tensor if self.bias is not None else self._zero_bias
        return conv2d(x, self.weight.tensor, b, stride=self.stride, padding=self.padding, strict=strict)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class Linear:
    """Fully connected layer: y = x @ W.T + b."""

    def __init__(self, name, d_in, d_out, rng, dtype=np.float64):
        self.weight = Parameter(f"{name}.weight", he_normal(rng, (d_out, d_in), d_in, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out, dtype=dtype))

    def __call__(self, x):
        return linear(x, self.weight.tensor, self.bias.tensor)

    def parameters(self):
        return [self.weight, self.bias]
