"""Parameter containers and the small set of layers the models need."""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """Attribute-walking parameter registry, in the spirit of torch.nn.Module."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def num_trainable(self) -> int:
        return int(sum(p.size for p in self.trainable_parameters()))

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.freeze()
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, Parameter]:
        return {prefix + n: p for n, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy arrays into matching parameters; every parameter must be present."""
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"missing tensor {key!r}")
            arr = np.asarray(arrays[key])
            if arr.shape != p.shape:
                raise ValueError(f"{key}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype)

    def astype(self, dtype) -> "Module":
        """Deep copy with every parameter cast to ``dtype`` (oracle mode)."""
        twin = copy.deepcopy(self)
        for p in twin.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return twin


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True,
                 init: str = "he", name: str = ""):
        if init == "zeros":
            w = np.zeros((d_in, d_out), dtype=np.float32)
        elif init == "trunc_normal":
            w = trunc_normal(rng, (d_in, d_out))
        else:
            w = he_normal(rng, (d_in, d_out), d_in)
        self.weight = Parameter(w, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32), name=f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, name: str = ""):
        self.gamma = Parameter(np.ones(dim, dtype=np.float32), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim, dtype=np.float32), name=f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, pad: int = 0, bias: bool = True, zero_init: bool = False):
        shape = (c_out, c_in, kernel, kernel)
        if zero_init:
            w = np.zeros(shape, dtype=np.float32)
        else:
            w = he_normal(rng, shape, c_in * kernel * kernel)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32)) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)
