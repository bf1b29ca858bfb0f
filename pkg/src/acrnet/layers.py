"""Parameterised layers: grouped convolution, batch norm, (binarised) dense,
and the ReLU family."""

from __future__ import annotations

import contextlib
import copy
from collections import OrderedDict
from typing import Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor

PRELU_INIT = 0.3
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Parameter(Tensor):
    """A leaf tensor that is trained by default."""

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Module:
    """Minimal container: parameters, buffers and sub-modules are found by
    walking instance attributes in definition order."""

    training = True
    _buffer_names: Tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        from .errors import ShapeError

        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.named_parameters():
            _assign(p.data, state[name], name)
        for name, buf in self.named_buffers():
            _assign(buf, state[name], name)

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place (e.g. float64 for grad checks)."""
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Parameter):
                    value.data = value.data.astype(dtype)
                    value.grad = None
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def _assign(dst: np.ndarray, src: np.ndarray, name: str):
    from .errors import ShapeError

    src = np.asarray(src)
    if src.shape != dst.shape:
        raise ShapeError(f"{name}: stored shape {src.shape} != model shape {dst.shape}")
    dst[...] = src


_shape_only = False


@contextlib.contextmanager
def shape_only():
    """Build layers with zero weights and no RNG draws; enough for counting."""
    global _shape_only
    prev, _shape_only = _shape_only, True
    try:
        yield
    finally:
        _shape_only = prev


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    if _shape_only:
        return np.zeros(shape, dtype=np.float32)
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    """Stride-1 'same'-padded grouped convolution (odd kernel extents)."""

    def __init__(self, in_channels: int, out_channels: int, kernel, groups: int = 1,
                 bias: bool = False, rng: Optional[np.random.Generator] = None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        if groups < 1 or in_channels % groups or out_channels % groups:
            raise ConfigurationError(
                f"channels {in_channels}->{out_channels} not divisible by groups={groups}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigurationError(f"kernel {kh}x{kw} must have odd extents to preserve size")
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.groups = groups
        self.padding = (kh // 2, kw // 2)
        fan_in = (in_channels // groups) * kh * kw
        self.weight = Parameter(_uniform(rng, (out_channels, in_channels // groups, kh, kw), fan_in))
        self.bias = Parameter(_uniform(rng, (out_channels,), fan_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.padding, self.groups, self.bias)

    def flops(self, in_shape) -> int:
        _, h, w = in_shape
        kh, kw = self.kernel
        return (self.in_channels // self.groups) * kh * kw * self.out_channels * h * w

    def out_shape(self, in_shape):
        return (self.out_channels,) + tuple(in_shape[1:])

    def __repr__(self):
        return (f"Conv2d({self.in_channels}, {self.out_channels}, kernel={self.kernel}, "
                f"groups={self.groups})")


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)

    def __repr__(self):
        return f"BatchNorm2d({self.channels})"


class Dense(Module):
    """Fully connected layer, optionally with sign-binarised weights.

    When ``binarized`` the stored ``weight`` is the full-precision latent copy;
    the forward pass uses ``alpha_r * sign(weight)`` per output row r.
    """

    def __init__(self, in_dim: int, out_dim: int, binarized: bool = False,
                 rng: Optional[np.random.Generator] = None):
        rng = np.random.default_rng() if rng is None else rng
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.binarized = binarized
        self.weight = Parameter(_uniform(rng, (out_dim, in_dim), in_dim))
        self.bias = Parameter(_uniform(rng, (out_dim,), in_dim))

    def effective_weight(self) -> np.ndarray:
        if not self.binarized:
            return self.weight.data
        with T.no_grad():
            return T.binarize(self.weight).data

    def forward(self, x: Tensor) -> Tensor:
        w = T.binarize(self.weight) if self.binarized else self.weight
        return T.linear(x, w, self.bias)

    def flops(self, in_shape=None) -> int:
        return self.in_dim * self.out_dim

    def __repr__(self):
        tag = ", binarized" if self.binarized else ""
        return f"Dense({self.in_dim}, {self.out_dim}{tag})"


def binarize_dense(layer: Dense) -> Dense:
    """Return a binarised copy of ``layer`` whose latent weights start from its weights."""
    if layer.binarized:
        raise ConfigurationError("layer is already binarised")
    out = copy.deepcopy(layer)
    out.binarized = True
    return out


class PReLU(Module):
    """Learnable negative slope per channel (or one shared slope when ``num=1``)."""

    def __init__(self, num: int, init: float = PRELU_INIT):
        self.num = num
        self.alphas = Parameter(np.full(num, init, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.alphas)

    def freeze(self, value: Optional[float] = None):
        if value is not None:
            self.alphas.data[...] = value
        self.alphas.requires_grad = False

    def __repr__(self):
        return f"PReLU({self.num})"


class LeakyReLU(Module):
    def __init__(self, slope: float = PRELU_INIT):
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return T.leaky_relu(x, self.slope)

    def __repr__(self):
        return f"LeakyReLU({self.slope})"


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)


class Sigmoid(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.sigmoid(x)


def relu_forward(x: Tensor) -> Tensor:
    return T.relu(x)


def lrelu_forward(x: Tensor, slope: float = PRELU_INIT) -> Tensor:
    return T.leaky_relu(x, slope)


def prelu_forward(x: Tensor, alphas: Tensor) -> Tensor:
    return T.prelu(x, alphas)


def sigmoid_forward(x: Tensor) -> Tensor:
    return T.sigmoid(x)


def group_conv_forward(x: Tensor, layer: Conv2d) -> Tensor:
    if x.shape[1] != layer.in_channels:
        from .errors import ShapeError

        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {layer.in_channels}")
    return layer(x)


ACTIVATIONS = ("prelu", "sprelu", "lrelu")


def make_activation(kind: str, channels: int) -> Module:
    if kind == "prelu":
        return PReLU(channels)
    if kind == "sprelu":
        return PReLU(1)
    if kind == "lrelu":
        return LeakyReLU(PRELU_INIT)
    raise ConfigurationError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")
