"""Parameter containers and the three layer types the networks are built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor.  Frozen parameters keep ``requires_grad=False``."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)


class Module:
    """Walks attributes in definition order to enumerate parameters."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator):
        self.pad = (k - 1) // 2
        self.weight = Parameter(fan_in_uniform(rng, (cout, cin, k, k, k), cin * k ** 3))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, stride=1, pad=self.pad)


def averaging_kernel(k: int, up: bool) -> np.ndarray:
    """Kernel that turns a stride-2 (transposed) depthwise conv into exact
    2x2x2 mean pooling (down) or nearest-neighbour unpooling (up)."""
    taps = np.zeros(k)
    c = k // 2
    taps[c:c + 2] = 1.0 if up else 0.5
    return np.einsum("i,j,l->ijl", taps, taps, taps)


class DepthwiseConv3d(Module):
    """Per-channel convolution.  ``init`` is ``"random"``, ``"down"`` or ``"up"``."""

    def __init__(self, c: int, k: int, rng: np.random.Generator, stride: int = 1,
                 init: str = "random", bias: bool = True):
        self.stride = stride
        self.pad = (k - 1) // 2
        if init == "random":
            w = fan_in_uniform(rng, (c, k, k, k), k ** 3)
        else:
            w = np.broadcast_to(averaging_kernel(k, up=init == "up"), (c, k, k, k))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv3d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    """Pointwise (1x1x1) channel projection."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.weight = Parameter(fan_in_uniform(rng, (cout, cin), cin))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return ops.pointwise_linear(x, self.weight, self.bias)

    def set_identity(self) -> None:
        cout, cin = self.weight.shape
        if cout != cin:
            raise ValueError("identity needs a square projection")
        self.weight.data = np.eye(cin, dtype=self.weight.dtype)
        self.bias.data = np.zeros(cout, dtype=self.bias.dtype)
