"""Parameter containers: a tiny ``Module`` with hierarchical names, plus Linear."""
from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .numerics import Tensor, matmul


class Module:
    """Walks attributes to find parameters; names are dotted attribute paths.

    Attributes holding a ``Tensor`` are parameters, attributes holding a
    ``Module`` (or a list of them) are children. Frozen parameters are simply
    tensors with ``requires_grad=False``.
    """

    def named_parameters(self, prefix: str = "", include_frozen: bool = True) -> Iterator[tuple[str, Tensor]]:
        for key in sorted(vars(self)):
            value = vars(self)[key]
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if include_frozen or value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".", include_frozen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.", include_frozen)

    def parameters(self, trainable_only: bool = True) -> list[Tensor]:
        return [p for _, p in self.named_parameters(include_frozen=not trainable_only)]

    def trainable(self) -> dict[str, Tensor]:
        return dict(self.named_parameters(include_frozen=False))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.asarray(state[name], dtype=p.data.dtype).copy()

    def to_dtype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def num_parameters(self, trainable_only: bool = False) -> int:
        return int(sum(p.data.size for _, p in self.named_parameters(include_frozen=not trainable_only)))


def checksum(module: Module, trainable_only: bool = False) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters(include_frozen=not trainable_only):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def param(rng: np.random.Generator, shape, scale: float, trainable: bool = True) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=trainable, dtype=np.float32)


def zeros(shape, trainable: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=trainable, dtype=np.float32)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True,
                 trainable: bool = True, scale: float | None = None):
        s = 1.0 / np.sqrt(d_in) if scale is None else scale
        self.weight = param(rng, (d_in, d_out), s, trainable)
        self.bias = zeros((d_out,), trainable) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y
