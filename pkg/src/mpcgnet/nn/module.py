"""Parameter containers and the primitive layers the blocks are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .. import tensor as T
from ..tensor import Tensor


def norm_groups(channels: int) -> int:
    """Group count for group-norm: 8, or one group per channel below 8."""
    return 8 if channels >= 8 and channels % 8 == 0 else channels


class Module:
    """Base class: parameters are Tensor attributes, children are Module attributes.

    Registration follows attribute assignment order, so parameter walks and
    checkpoints are deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype).copy()

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used for float64 shadow evaluation)."""
        for m in self.modules():
            for key, val in vars(m).items():
                if isinstance(val, Tensor) and val.requires_grad:
                    setattr(m, key, val.astype(dtype))
        return self

    def param_count(self) -> int:
        """Analytic parameter count from the layer configuration."""
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, groups=1, bias=True):
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.groups = stride, groups
        self.padding = k // 2 if padding is None else padding
        self.has_bias = bias
        fan_in = cin // groups * k * k
        self.weight = _uniform(rng, (cout, cin // groups, k, k), fan_in)
        if bias:
            self.bias = _uniform(rng, (cout,), fan_in)

    def forward(self, x: Tensor) -> Tensor:
        b = self.bias if self.has_bias else None
        return T.conv2d(x, self.weight, b, self.stride, self.padding, self.groups)

    def param_count(self) -> int:
        return self.cout * (self.cin // self.groups) * self.k * self.k + (self.cout if self.has_bias else 0)

    def flops(self, h_out: int, w_out: int) -> int:
        return 2 * self.cout * (self.cin // self.groups) * self.k * self.k * h_out * w_out


class DepthwiseConv2d(Conv2d):
    def __init__(self, channels, k, rng, stride=1, bias=True):
        super().__init__(channels, channels, k, rng, stride=stride, groups=channels, bias=bias)


class Pointwise(Module):
    """1×1 convolution holding a ``(Cout, Cin)`` weight matrix."""

    def __init__(self, cin, cout, rng, bias=True):
        self.cin, self.cout, self.has_bias = cin, cout, bias
        self.weight = _uniform(rng, (cout, cin), cin)
        if bias:
            self.bias = _uniform(rng, (cout,), cin)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ValueError(f"pointwise: expected {self.cin} input channels, got shape {x.shape}")
        return T.pointwise_conv(x, self.weight, self.bias if self.has_bias else None)

    def param_count(self) -> int:
        return self.cin * self.cout + (self.cout if self.has_bias else 0)

    def flops(self, h: int, w: int) -> int:
        return 2 * self.cin * self.cout * h * w


class GroupNorm(Module):
    def __init__(self, channels, affine=True, eps=1e-5):
        self.channels, self.affine, self.eps = channels, affine, eps
        self.groups = norm_groups(channels)
        if affine:
            self.weight = Tensor(np.ones(channels), requires_grad=True)
            self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if self.affine:
            return T.group_norm(x, self.groups, self.eps, self.weight, self.bias)
        return T.group_norm(x, self.groups, self.eps)

    def param_count(self) -> int:
        return 2 * self.channels if self.affine else 0
