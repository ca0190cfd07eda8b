"""Parameter containers and the handful of layers the models are built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Module:
    """Tree of named parameters.

    Attributes holding a ``Tensor``, a ``Module`` or a list of modules are
    discovered in insertion order.
    Attributes whose name starts with an underscore are never traversed.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise T.ShapeError(f"load_state_dict: {k} expects {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = 0.02):
        self.weight = T.parameter(trunc_normal(rng, (d_in, d_out), std))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.scale = T.parameter(np.ones(dim))
        self.shift = T.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.scale, self.shift)


def _he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding="same"):
        self.weight = T.parameter(rng.standard_normal((kernel, kernel, c_in, c_out))
                                  * _he_std(kernel * kernel * c_in))
        self.bias = T.parameter(np.zeros(c_out))
        self._stride = stride
        self._padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self._stride, self._padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 2, padding="same"):
        fan_in = kernel * kernel * c_in // (stride * stride)
        self.weight = T.parameter(rng.standard_normal((kernel, kernel, c_out, c_in))
                                  * _he_std(max(fan_in, 1)))
        self.bias = T.parameter(np.zeros(c_out))
        self._stride = stride
        self._padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_transpose(x, self.weight, self.bias, self._stride, self._padding)
