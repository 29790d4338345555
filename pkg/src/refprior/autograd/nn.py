"""Parameter containers and layer modules built on the functional primitives."""

import math
from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype, silu


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def fan_in_uniform(rng, shape, fan_in):
    """Uniform on ``[-b, b]`` with ``b = sqrt(3 / fan_in)`` (unit output variance)."""
    bound = math.sqrt(3.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(get_default_dtype()))


def zeros(shape):
    return Parameter(np.zeros(shape, dtype=get_default_dtype()))


def ones(shape):
    return Parameter(np.ones(shape, dtype=get_default_dtype()))


class Module:
    """Base class: parameters are discovered from attributes in definition order.

    Attributes that are :class:`Parameter`, :class:`Module`, or lists of
    modules contribute dotted names such as ``enc.0.conv1.weight``.
    """

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(
                f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
            )
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel=3, stride=1, padding=None, dilation=1):
        self.weight = fan_in_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        self.bias = zeros((c_out,))
        self._stride = stride
        self._padding = dilation * (kernel // 2) if padding is None else padding
        self._dilation = dilation

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self._stride, self._padding, self._dilation)


class Linear(Module):
    def __init__(self, rng, d_in, d_out):
        self.weight = fan_in_uniform(rng, (d_out, d_in), d_in)
        self.bias = zeros((d_out,))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, groups, channels, eps=1e-5):
        self.gamma = ones((channels,))
        self.beta = zeros((channels,))
        self._groups = groups
        self._eps = eps

    def forward(self, x):
        return F.group_norm(x, self._groups, self.gamma, self.beta, self._eps)


class ConvBlock(Module):
    """conv -> group norm -> SiLU."""

    def __init__(self, rng, c_in, c_out, groups, kernel=3, stride=1, padding=None):
        self.conv = Conv2d(rng, c_in, c_out, kernel, stride, padding)
        self.norm = GroupNorm(groups, c_out)

    def forward(self, x):
        return silu(self.norm(self.conv(x)))


class SelfAttention(Module):
    def __init__(self, rng, dim, heads):
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self._heads = heads

    def forward(self, tokens):
        return F.self_attention(
            tokens, self._heads, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias
        )
