"""
Parameter containers built on the tensor tape.
"""
import math
from typing import Iterator, List, Tuple

import numpy as np

from conformer_r.tensor import BatchNormStats, Tensor, batch_norm, layer_norm


class Module:
    """Base class: walks attributes to find parameters, buffers and sub-modules."""

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_batch_stats(self, prefix: str = "") -> Iterator[Tuple[str, BatchNormStats]]:
        for name, value in vars(self).items():
            if isinstance(value, BatchNormStats):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_batch_stats(f"{prefix}{name}.")

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Non-trainable state persisted in checkpoints (batch-norm running stats)."""
        for name, stats in self.named_batch_stats():
            yield f"{name}.mean", stats.mean
            yield f"{name}.var", stats.var

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        owner, field_name = name.rsplit(".", 1)
        stats = dict(self.named_batch_stats())[owner]
        setattr(stats, field_name, np.array(value, dtype=np.float64))

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Linear(Module):
    """y = x W + b with W [d_in x d_out]."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = parameter(xavier(rng, d_in, d_out))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    """Batch normalization over the row axis of [N x C]; momentum 0.1, eps 1e-5."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.stats = BatchNormStats.fresh(channels, momentum, eps)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, train)
