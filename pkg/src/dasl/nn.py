"""Parameter containers shared by the model components."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .autodiff import DimensionError, Tensor, add_bias, matmul, reshape, tanh, transpose


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Anything holding trainable tensors as attributes or child modules.

    ``named_parameters`` walks attributes in definition order, which fixes the
    registry order used by checkpoints.
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


class Linear(Module):
    """y = x W^T + b with W stored [out, in].

    ``bias_scale`` > 0 draws the bias uniformly from [-bias_scale, bias_scale]
    instead of zeros.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 bias_scale: float = 0.0):
        data = glorot_uniform(rng, (n_out, n_in)) if rng is not None else np.zeros((n_out, n_in))
        self.weight = Tensor(data, requires_grad=True)
        if rng is not None and bias_scale > 0:
            bias = rng.uniform(-bias_scale, bias_scale, size=n_out)
        else:
            bias = np.zeros(n_out)
        self.bias = Tensor(bias, requires_grad=True)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"linear layer expects width {self.n_in}, got {x.shape}")
        if x.data.ndim == 1:
            return reshape(self(reshape(x, (1, self.n_in))), (self.n_out,))
        return add_bias(matmul(x, transpose(self.weight)), self.bias)


class MLP(Module):
    """tanh on hidden layers, linear output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None,
                 hidden_bias_scale: float = 0.0):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        n = len(sizes) - 1
        self.layers = [Linear(a, b, rng, hidden_bias_scale if i < n - 1 else 0.0)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tanh(x)
        return x
