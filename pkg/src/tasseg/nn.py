"""Parameter containers and the few layers shared by every model."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, conv1d


class Module:
    """Minimal module tree: attributes that are Tensors with ``requires_grad``
    are parameters, attributes that are Modules (or lists of them) are
    children.  Names follow attribute paths, e.g. ``encoder.blocks.3.conv.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_param(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                  dtype=np.float64) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = uniform_param(rng, (d_in, d_out), d_in)
        self.bias = uniform_param(rng, (d_out,), d_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv1d(Module):
    """Time-major dilated convolution with symmetric zero padding."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 kernel_size: int = 3, dilation: int = 1):
        fan_in = d_in * kernel_size
        self.weight = uniform_param(rng, (kernel_size, d_in, d_out), fan_in)
        self.bias = uniform_param(rng, (d_out,), fan_in)
        self.dilation = dilation

    def forward(self, x: Tensor, dilation: int | None = None) -> Tensor:
        return conv1d(x, self.weight, self.bias, dilation or self.dilation)
