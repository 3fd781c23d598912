"""Minimal layer containers on top of the tensor ops."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Tuple

import numpy as np

from . import ops
from .rng import xavier_uniform
from .tensor import Tensor, parameter


class ParamSet(OrderedDict):
    """Named trainable tensors in construction order."""

    def __setitem__(self, key, value):
        if key in self:
            raise KeyError(f"duplicate parameter name '{key}'")
        super().__setitem__(key, value)

    def count(self) -> int:
        return int(sum(p.size for p in self.values()))

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None


class Module:
    """Parameters and submodules are discovered from attributes, in
    assignment order, which keeps ``named_parameters`` deterministic."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def params(self) -> ParamSet:
        ps = ParamSet()
        for name, p in self.named_parameters():
            ps[name] = p
        return ps

    def num_parameters(self) -> int:
        return self.params().count()

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(xavier_uniform(rng, (d_out, d_in), d_in, d_out))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0):
        self.weight = parameter(xavier_uniform(rng, (c_out, c_in, k), c_in * k, c_out * k))
        self.bias = parameter(np.zeros(c_out))
        self.stride, self.padding = stride, padding

    def __call__(self, x) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0):
        self.weight = parameter(xavier_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k))
        self.bias = parameter(np.zeros(c_out))
        self.stride, self.padding = stride, padding

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, axis=-1)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng

    def __call__(self, x) -> Tensor:
        return ops.dropout(x, self.rate, self.rng, self.training)
