"""A small parameter-container base class and initializers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from algnet.tensor import Parameter, get_default_dtype


class Module:
    """Holds Parameters and child Modules; names follow attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
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

    def name_parameters(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            p.assign(state[name])

    def astype(self, dtype) -> "Module":
        """Cast every parameter (and its grad) to ``dtype`` in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def zero_weights(self) -> None:
        for p in self.parameters():
            p.assign(np.zeros_like(p.data))


def uniform_param(rng: np.random.Generator, shape, bound: float) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(get_default_dtype()))


def conv_weight(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> Parameter:
    return uniform_param(rng, (out_ch, in_ch, k, k), 1.0 / np.sqrt(in_ch * k * k))


def conv_bias(rng: np.random.Generator, out_ch: int, fan_in: int) -> Parameter:
    return uniform_param(rng, (out_ch,), 1.0 / np.sqrt(fan_in))


def zeros_param(shape) -> Parameter:
    return Parameter(np.zeros(shape, dtype=get_default_dtype()))


def ones_param(shape) -> Parameter:
    return Parameter(np.ones(shape, dtype=get_default_dtype()))
