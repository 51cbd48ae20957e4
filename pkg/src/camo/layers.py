"""Parameter containers and the small building blocks shared by encoder and decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import xavier
from .tensor import Tensor


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int) -> "Linear":
        return cls(T.tensor(xavier(rng, d_in, d_out), requires_grad=True), T.tensor(np.zeros(d_out), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.weight), self.bias)


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d: int) -> "LayerNorm":
        return cls(T.tensor(np.ones(d), requires_grad=True), T.tensor(np.zeros(d), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


@dataclass
class FeedForward:
    inner: Linear
    outer: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, d_ff: int) -> "FeedForward":
        return cls(Linear.init(rng, d_model, d_ff), Linear.init(rng, d_ff, d_model))

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses/lists depth-first, yielding ``(dotted.name, tensor)``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None or isinstance(value, (int, float, str, bool)):
                continue
            yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
