"""Minimal module system: named parameter traversal plus a few standard layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class Module:
    """Parameters are discovered from attributes in definition order."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=tn.DEFAULT_DTYPE) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return tn.parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


class Linear(Module):
    """Affine map over the last axis; weight is stored (out, in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, (d_out, d_in), d_in)
        self.bias = uniform_init(rng, (d_out,), d_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.weight, self.bias)


class Conv1d(Module):
    """Conv over (B, C, T). ``causal`` pads only on the left so outputs never see the future."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        causal: bool = False,
        depthwise: bool = False,
        bias: bool = True,
    ):
        if depthwise and c_in != c_out:
            raise ValueError("depthwise conv needs c_in == c_out")
        self.kernel = kernel
        self.causal = causal
        self.groups = c_in if depthwise else 1
        fan_in = kernel if depthwise else c_in * kernel
        self.weight = uniform_init(rng, (c_out, 1 if depthwise else c_in, kernel), fan_in)
        self.bias = uniform_init(rng, (c_out,), fan_in) if bias else None

    def padding(self) -> tuple[int, int]:
        k = self.kernel
        if self.causal:
            return (k - 1, 0)
        return ((k - 1) // 2, k // 2)

    def forward(self, x: Tensor) -> Tensor:
        return tn.conv1d(x, self.weight, self.bias, padding=self.padding(), groups=self.groups)
