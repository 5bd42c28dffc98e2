"""Parameters, module containers and layer primitives."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import NumericError
from . import ops
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A named, trainable tensor."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal container: parameters and sub-modules are plain attributes.

    Parameter names are dotted attribute paths, assigned by
    :meth:`named_parameters` in attribute-definition order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        params = []
        for name, p in self.named_parameters():
            p.name = name
            params.append(p)
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"parameter {name} has non-finite values")


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0):
        dtype = get_default_dtype()
        fan_in = cin * k * k
        self.weight = Parameter(he_uniform(rng, (cout, cin, k, k), fan_in).astype(dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, din: int, dout: int):
        dtype = get_default_dtype()
        self.weight = Parameter(he_uniform(rng, (dout, din), din).astype(dtype))
        self.bias = Parameter(np.zeros(dout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
