"""Flat parameter vectors with per-layer layout metadata."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

# Bit width of the uncompressed wire representation of one parameter.
REPR_BITS = 32


@dataclass(frozen=True)
class LayerSlice:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


class ParameterVector:
    """Immutable float64 vector plus an ordered, contiguous layer layout."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Sequence[LayerSlice]):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        arr.flags.writeable = False
        layout = tuple(layout)
        pos = 0
        for entry in layout:
            if entry.offset != pos:
                raise ValueError(f"layout not contiguous at {entry.name!r}")
            if entry.length != int(np.prod(entry.shape, dtype=np.int64)):
                raise ValueError(f"shape {entry.shape} does not match length {entry.length}")
            pos += entry.length
        if pos != arr.size:
            raise ValueError(f"layout covers {pos} values, vector has {arr.size}")
        self.values = arr
        self.layout = layout

    @classmethod
    def from_shapes(cls, values, shapes: Sequence[tuple[str, tuple[int, ...]]]) -> "ParameterVector":
        layout = []
        pos = 0
        for name, shape in shapes:
            shape = tuple(int(x) for x in shape)
            n = int(np.prod(shape, dtype=np.int64))
            layout.append(LayerSlice(name, pos, n, shape))
            pos += n
        return cls(values, layout)

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def layer_names(self) -> list[str]:
        return [e.name for e in self.layout]

    def layer(self, name: str) -> np.ndarray:
        for e in self.layout:
            if e.name == name:
                return self.values[e.offset:e.offset + e.length].reshape(e.shape)
        raise KeyError(name)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        names = ", ".join(self.layer_names())
        return f"ParameterVector(n={self.values.size}, layers=[{names}])"


def flatten(named_layers: Mapping[str, np.ndarray], order: Sequence[str] | None = None) -> ParameterVector:
    """Concatenate layers in ``order`` (defaults to mapping order)."""
    if order is None:
        order = list(named_layers)
    arrays = [np.asarray(named_layers[name], dtype=np.float64) for name in order]
    if not arrays or sum(a.size for a in arrays) == 0:
        raise ValueError("no parameters")
    values = np.concatenate([a.reshape(-1) for a in arrays])
    return ParameterVector.from_shapes(values, [(name, a.shape) for name, a in zip(order, arrays)])


def unflatten(v: ParameterVector) -> dict[str, np.ndarray]:
    return {e.name: v.values[e.offset:e.offset + e.length].reshape(e.shape).copy() for e in v.layout}


def split_layers(v: ParameterVector) -> list[ParameterVector]:
    """One single-layer vector per layout entry."""
    return [
        ParameterVector.from_shapes(v.values[e.offset:e.offset + e.length], [(e.name, e.shape)])
        for e in v.layout
    ]


def concat(parts: Sequence[ParameterVector]) -> ParameterVector:
    if not parts:
        raise ValueError("no parameters")
    values = np.concatenate([p.values for p in parts])
    shapes = [(e.name, e.shape) for p in parts for e in p.layout]
    return ParameterVector.from_shapes(values, shapes)


def l2_norm(v: ParameterVector) -> float:
    return float(np.linalg.norm(v.values))


def linf_norm(v: ParameterVector) -> float:
    if v.values.size == 0:
        return 0.0
    return float(np.max(np.abs(v.values)))


def param_count(v: ParameterVector) -> int:
    return sum(e.length for e in v.layout)


def _check_compatible(a: ParameterVector, b: ParameterVector) -> None:
    if [(e.name, e.shape) for e in a.layout] != [(e.name, e.shape) for e in b.layout]:
        raise ValueError("incompatible shapes")


def diff(a: ParameterVector, b: ParameterVector) -> ParameterVector:
    """Elementwise ``a - b``."""
    _check_compatible(a, b)
    return ParameterVector(a.values - b.values, a.layout)


def add(a: ParameterVector, b: ParameterVector) -> ParameterVector:
    _check_compatible(a, b)
    return ParameterVector(a.values + b.values, a.layout)


def scale(v: ParameterVector, c: float) -> ParameterVector:
    return ParameterVector(v.values * c, v.layout)
