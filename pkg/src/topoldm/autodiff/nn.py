"""Layers built on the autodiff ops."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def seeded_init(shape, scheme="uniform", seed=0, fan_in=None, dtype=None) -> Tensor:
    """Deterministic parameter initialization.

    ``uniform`` draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)). ``fan_in``
    defaults to the product of all but the first axis.
    """
    shape = tuple(int(s) for s in shape)
    rng = _rng(seed)
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "ones":
        data = np.ones(shape)
    elif scheme == "normal":
        data = rng.standard_normal(shape)
    elif scheme == "uniform":
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else max(shape[0] if shape else 1, 1)
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        data = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=True, dtype=dtype)


class Module:
    """Container that discovers parameters and submodules from its attributes."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{k}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for k, p in params.items():
            if k in state:
                value = np.asarray(state[k])
                if value.shape != p.shape:
                    raise ValueError(f"{k}: checkpoint shape {value.shape} != parameter shape {p.shape}")
                p.data = np.array(value, dtype=p.dtype, order="C")

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in, d_out, rng=0, bias=True):
        rng = _rng(rng)
        self.weight = seeded_init((d_in, d_out), "uniform", rng, fan_in=d_in)
        self.bias = seeded_init((d_out,), "uniform", rng, fan_in=d_in) if bias else None

    def forward(self, x):
        out = T.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, groups=1, rng=0, bias=True):
        rng = _rng(rng)
        self.stride, self.groups = stride, groups
        self.padding = kernel // 2 if padding is None else padding
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = seeded_init((c_out, c_in // groups, kernel, kernel), "uniform", rng, fan_in=fan_in)
        self.bias = seeded_init((c_out,), "uniform", rng, fan_in=fan_in) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class GroupNorm(Module):
    def __init__(self, channels, groups=8):
        self.groups = math.gcd(groups, channels)
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x):
        return T.group_norm(x, self.groups, self.weight, self.bias)
