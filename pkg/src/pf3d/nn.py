"""Tiny layer/module system over the tensor core.

Modules register parameters through plain attribute assignment; the
parameter registry is the recursive walk in ``named_parameters``, which
also stamps each Parameter with its dotted path name.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Base class: attribute-registered parameters and submodules."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if key == "training":
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                val.name = name
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{name}.{i}"
                        yield item.name, item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for val in vars(self).values():
            if isinstance(val, Module):
                val.train(mode)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters; returns names not found in
        ``state`` (empty when strict, which raises instead)."""
        own = dict(self.named_parameters())
        missing = [n for n in own if n not in state]
        unexpected = [n for n in state if n not in own]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, arr in state.items():
            if name in own:
                if own[name].data.shape != arr.shape:
                    raise T.ShapeError(
                        f"param {name}: checkpoint {arr.shape} vs model {own[name].data.shape}"
                    )
                own[name].data = np.array(arr, dtype=np.float64, copy=True)
        return missing


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(_xavier(rng, n_in, n_out, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = True,
    ):
        super().__init__()
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = Parameter(
            _xavier(rng, fan_in, c_out, (c_out, c_in // groups, kernel, kernel))
        )
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        # Accept [C,H,W] for single feature maps; batch handled transparently.
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        out = T.conv2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            dilation=self.dilation,
            groups=self.groups,
        )
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out


class MLP(Module):
    """Stack of Linear layers with GeLU between (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, bias=bias) for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


def map_to_tokens(fmap: Tensor) -> Tensor:
    """[C, H, W] feature map -> [H*W, C] token matrix."""
    c, h, w = fmap.shape
    return T.reshape(T.permute(fmap, (1, 2, 0)), (h * w, c))


def tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    """[H*W, C] token matrix -> [C, H, W] feature map."""
    c = tokens.shape[-1]
    return T.permute(T.reshape(tokens, (h, w, c)), (2, 0, 1))
