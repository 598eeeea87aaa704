from __future__ import annotations

from typing import Iterator

import numpy as np

from .ops import RunningStats
from .tensor import Parameter


class Module:
    """Container that discovers Parameters, RunningStats and sub-Modules by attribute order."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in vars(self).items():
            if isinstance(val, RunningStats):
                yield f"{prefix}{name}.running_mean", val.mean
                yield f"{prefix}{name}.running_var", val.var
            elif isinstance(val, Module):
                yield from val.named_buffers(prefix + name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = [k for k in list(own) + list(bufs) if k not in state]
        if strict and missing:
            raise KeyError(f"missing entries in state: {missing[:5]}")
        for k, p in own.items():
            if k in state:
                if state[k].shape != p.data.shape:
                    raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
                p.data = state[k].astype(p.data.dtype, copy=True)
        for k, b in bufs.items():
            if k in state:
                b[...] = state[k]

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for val in vars(m).values():
                if isinstance(val, RunningStats):
                    val.mean = val.mean.astype(dtype)
                    val.var = val.var.astype(dtype)
        return self
