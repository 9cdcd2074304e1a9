"""Minimal parameter container used by the network modules."""

from __future__ import annotations

import numpy as np

from spacepose.diff.node import Node
from spacepose.errors import ConfigError


class Module:
    """Holds named parameters (grad-requiring leaves), buffers and child modules.

    Names are dotted paths (``stages.0.down.weight``) and double as checkpoint keys.
    """

    def __init__(self):
        self._params: dict[str, Node] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray) -> Node:
        node = Node(value, requires_grad=True, name=name)
        self._params[name] = node
        return node

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Node]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, mod in self._children.items():
            out.update(mod.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for name, mod in self._children.items():
            out.update(mod.named_buffers(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Node]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.value.copy() for k, v in self.named_parameters().items()}
        out.update({k: v.copy() for k, v in self.named_buffers().items()})
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching tensors in place; returns the names that were loaded."""
        params, bufs = self.named_parameters(), self.named_buffers()
        loaded = []
        for name, target in list(params.items()) + list(bufs.items()):
            if name not in tensors:
                if strict:
                    raise ConfigError(f"missing tensor {name!r}")
                continue
            arr = tensors[name]
            dest = target.value if isinstance(target, Node) else target
            if arr.shape != dest.shape:
                raise ConfigError(f"shape mismatch for {name!r}: {arr.shape} vs {dest.shape}")
            dest[...] = arr
            loaded.append(name)
        if strict:
            extra = set(tensors) - set(params) - set(bufs)
            if extra:
                raise ConfigError(f"unexpected tensors: {sorted(extra)}")
        return loaded


def he_normal(rng, shape, fan_in: int, dtype, slope: float = 0.1) -> np.ndarray:
    std = np.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in))
    return rng.normal(0.0, std, size=shape).astype(dtype)
