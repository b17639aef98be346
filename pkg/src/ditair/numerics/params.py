"""Parameters and the ordered store that owns them.

A ``Param`` is identified by object identity: layers that share weights hold
the same ``Param``, so gradient accumulation sums over use sites for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

COMPONENTS = ("adaln", "self_mha", "cross_mha", "mlp", "overhead")


@dataclass(eq=False)
class Param:
    name: str
    shape: tuple[int, ...]
    component: str = "overhead"
    kind: str = "weight"  # weight | bias | norm | embed
    value: np.ndarray | None = None
    grad: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def zero_grad(self) -> None:
        if self.value is not None:
            self.grad = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


@dataclass
class ParamStore:
    """Canonical construction-ordered registry of unique parameters.

    With ``shape_only`` set, parameters carry shapes but no storage; that is
    enough for parameter audits of billion-weight presets.
    """

    rng: Rng | None = None
    dtype: type = np.float32
    shape_only: bool = False
    params: list[Param] = field(default_factory=list)

    def new(self, name, shape, component="overhead", kind="weight", init="normal", std=None) -> Param:
        if component not in COMPONENTS:
            raise ValueError(f"unknown component {component!r}")
        shape = tuple(int(s) for s in shape)
        value = None
        if not self.shape_only:
            if init == "zeros":
                value = np.zeros(shape, dtype=self.dtype)
            elif init == "ones":
                value = np.ones(shape, dtype=self.dtype)
            elif init == "normal":
                fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[:-1]))
                s = std if std is not None else 1.0 / np.sqrt(fan_in)
                value = (s * self.rng.normal(shape)).astype(self.dtype)
            else:
                raise ValueError(f"unknown init {init!r}")
        p = Param(name, shape, component, kind, value)
        self.params.append(p)
        return p

    def drop_unreferenced(self, keep: set[int]) -> None:
        self.params = [p for p in self.params if id(p) in keep]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def named_values(self) -> list[tuple[str, np.ndarray]]:
        return [(p.name, p.value) for p in self.params]

    def count(self) -> int:
        return sum(p.size for p in self.params)
