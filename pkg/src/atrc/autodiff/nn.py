"""Minimal module containers: parameters, buffers, conv and batch-norm layers."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, relu, softplus


class Parameter(Tensor):
    """A trainable tensor. ``no_affine`` marks tensors kept out of learning."""

    __slots__ = ("name", "no_affine")

    def __init__(self, data, name: str = "", no_affine: bool = False):
        super().__init__(data, requires_grad=not no_affine)
        self.name = name
        self.no_affine = no_affine


class Module:
    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, Module]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield f"{key}.{k}", item

    def own_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield key, val

    def own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield key, getattr(self, key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self.own_parameters():
            yield prefix + key, p
        for key, child in self.children():
            yield from child.named_parameters(prefix + key + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, b in self.own_buffers():
            yield prefix + key, b
        for key, child in self.children():
            yield from child.named_buffers(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"load_state_dict: missing entries {sorted(missing)[:5]}")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.data.dtype).reshape(p.shape)
        for name, b in buffers.items():
            b[...] = state[name].reshape(b.shape)

    def to_dtype(self, dtype) -> Module:
        for m in self.modules():
            for _, p in m.own_parameters():
                p.data = p.data.astype(dtype)
            for key, b in list(m.own_buffers()):
                setattr(m, key, b.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(he_uniform(rng, (out_ch, in_ch, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, affine: bool = True):
        super().__init__()
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.affine = affine
        if affine:
            self.gamma = Parameter(np.ones(channels, np.float32))
            self.beta = Parameter(np.zeros(channels, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        gamma = self.gamma if self.affine else None
        beta = self.beta if self.affine else None
        return F.batchnorm2d(x, self.running_mean, self.running_var, gamma, beta, training=self.training)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor] | None] = {
    "relu": relu,
    "softplus": softplus,
    "none": None,
}


class ConvBNAct(Module):
    """Conv followed by batch norm and an optional activation."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 act: str = "relu", affine: bool = True):
        super().__init__()
        # conv bias is redundant under batch norm
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, bias=False)
        self.bn = BatchNorm2d(out_ch, affine=affine)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        fn = ACTIVATIONS[self.act]
        return fn(y) if fn is not None else y
