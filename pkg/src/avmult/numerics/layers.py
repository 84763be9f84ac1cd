"""Parameter containers built on the tensor ops."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..errors import ConfigError
from . import ops
from .tensor import Tensor, default_dtype


def parameter(shape, rng=None, bound=None):
    """Learnable tensor drawn from U(-bound, bound), zeros when bound is None.

    With ``rng=None`` and a bound the tensor is an abstract zero-stride
    placeholder: it has the right shape for counting but owns no memory.
    """
    shape = tuple(int(s) for s in shape)
    dtype = default_dtype()
    if bound is None:
        data = np.zeros(shape, dtype=dtype)
    elif rng is None:
        data = np.broadcast_to(np.zeros((), dtype=dtype), shape)
    else:
        data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def he_bound(fan_in):
    return float(np.sqrt(6.0 / fan_in))


class Module:
    training = False

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None, bias=True):
        self.weight = parameter((d_in, d_out), rng, he_bound(d_in))
        self.bias = parameter((d_out,)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Tensor(np.ones(dim, dtype=default_dtype()), requires_grad=True)
        self.bias = parameter((dim,))
        self.eps = eps

    def forward(self, x):
        return ops.layernorm(x, self.gain, self.bias, self.eps)


class Conv1dTemporal(Module):
    """Same-padded temporal convolution mapping [.., T, Din] to [.., T, Dout]."""

    def __init__(self, d_in, d_out, kernel_size=1, rng=None, bias=False):
        if kernel_size % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd, got {kernel_size}")
        self.kernel = parameter((kernel_size, d_in, d_out), rng, he_bound(kernel_size * d_in))
        self.bias = parameter((d_out,)) if bias else None

    def forward(self, x):
        return ops.conv1d_temporal(x, self.kernel, self.bias)
