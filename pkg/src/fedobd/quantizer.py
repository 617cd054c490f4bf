"""Adaptive deterministic quantization (ADQ / NNADQ) and the stochastic baseline.

A quantized tensor stores, per element, a level in ``[0, s]`` and a sign, plus
three scalars: ``offset``, ``d`` and ``s``.  Reconstruction is always

    value = sign * level * d / s - offset

which covers both quantizers (the stochastic one uses ``offset = 0`` and
``d = ||v||_2``).

Encoded size of one tensor record, in bits (mirrored byte for byte by
:mod:`fedobd.fed_protocol`)::

    8                          record tag
    + layout_metadata_bits     16-bit entry count, then per layout entry a
                               16-bit name length, the UTF-8 name, an 8-bit
                               rank and one 32-bit extent per dimension
    + 3 * 64                   offset and d as float64, s as uint64
    + n * level_bits(s)        levels, LSB first
    + n                        sign bits (1 = negative)

The record is zero padded to a whole number of bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor_core import REPR_BITS, LayerSlice, ParameterVector

LN4 = math.log(4.0)
# Largest level count we emit; keeps level * d / s exact in float64.
MAX_LEVELS = 2**52

TAG_QUANTIZED = 1
TAG_RAW = 2
SCALAR_BITS = 3 * 64


@dataclass(frozen=True)
class QuantizationParams:
    beta: float = 0.001
    repr_bits: int = REPR_BITS

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.repr_bits < 1:
            raise ValueError("repr_bits must be positive")


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    levels: np.ndarray  # uint64
    signs: np.ndarray  # int8, +1 / -1
    offset: float
    d: float
    s: int
    layout: tuple[LayerSlice, ...]

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if self.d < 0:
            raise ValueError("d must be non-negative")
        if self.levels.shape != self.signs.shape:
            raise ValueError("levels and signs differ in length")
        if sum(e.length for e in self.layout) != self.levels.size:
            raise ValueError("layout does not match number of levels")

    @property
    def n(self) -> int:
        return int(self.levels.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.s == other.s
            and _same_float(self.offset, other.offset)
            and _same_float(self.d, other.d)
            and self.layout == other.layout
            and np.array_equal(self.levels, other.levels)
            and np.array_equal(self.signs, other.signs)
        )


@dataclass(frozen=True, eq=False)
class RawTensor:
    """Uncompressed tensor at the wire precision (float32)."""

    values: np.ndarray  # float32
    layout: tuple[LayerSlice, ...]

    @property
    def n(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RawTensor):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(
            self.values.view(np.uint32), other.values.view(np.uint32)
        )


def _same_float(a: float, b: float) -> bool:
    return np.float64(a).tobytes() == np.float64(b).tobytes()


def _signs(x: np.ndarray) -> np.ndarray:
    return np.where(x < 0, -1, 1).astype(np.int8)


def optimal_offset(v: np.ndarray) -> float:
    """Shift that minimises the infinity norm of ``v + offset``."""
    return -(float(np.max(v)) + float(np.min(v))) / 2.0


def optimal_levels(d: float, params: QuantizationParams) -> int:
    """Floor of the real-valued optimum ``max(sqrt(ln4 * REPR / beta * d), 1)``."""
    s = math.floor(max(math.sqrt(LN4 * params.repr_bits / params.beta * d), 1.0))
    return min(s, MAX_LEVELS)


def level_bits(s: int) -> int:
    """ceil(log2(s + 1)) for s >= 1."""
    return int(s).bit_length()


def round_to_levels(magnitude: np.ndarray, d: float, s: int) -> np.ndarray:
    """Nearest grid point of ``magnitude / d`` on {0, 1/s, ..., 1}; ties go up."""
    x = magnitude / d * s
    lower = np.floor(x)
    levels = lower + ((x - lower) >= 0.5)
    return np.clip(levels, 0, s).astype(np.uint64)


def adq_quantize(v: ParameterVector, params: QuantizationParams = QuantizationParams()) -> QuantizedTensor:
    values = v.values
    if values.size == 0:
        raise ValueError("cannot quantize an empty vector")
    offset = optimal_offset(values)
    shifted = values + offset
    d = float(np.max(np.abs(shifted)))
    signs = _signs(shifted)
    if d == 0.0:
        return QuantizedTensor(np.zeros(values.size, np.uint64), signs, offset, 0.0, 1, v.layout)
    s = optimal_levels(d, params)
    levels = round_to_levels(np.abs(shifted), d, s)
    return QuantizedTensor(levels, signs, offset, d, s, v.layout)


def dequantize(q) -> ParameterVector:
    """Inverse of either quantizer, or widening of a :class:`RawTensor`."""
    if isinstance(q, RawTensor):
        return ParameterVector(q.values.astype(np.float64), q.layout)
    values = q.signs.astype(np.float64) * (q.levels.astype(np.float64) * q.d / q.s) - q.offset
    return ParameterVector(values, q.layout)


adq_dequantize = dequantize
sq_dequantize = dequantize


def nnadq_quantize(layers: Sequence[ParameterVector], params: QuantizationParams = QuantizationParams()) -> list[QuantizedTensor]:
    if not layers:
        raise ValueError("no layers to quantize")
    return [adq_quantize(layer, params) for layer in layers]


def sq_quantize(v: ParameterVector, s: int = 255, seed=0) -> QuantizedTensor:
    """Unbiased stochastic quantization onto ``s`` intervals of ``|v| / ||v||_2``."""
    if s < 1:
        raise ValueError("s must be >= 1")
    values = v.values
    signs = _signs(values)
    norm = float(np.linalg.norm(values))
    if norm == 0.0:
        return QuantizedTensor(np.zeros(values.size, np.uint64), signs, 0.0, 0.0, s, v.layout)
    x = np.abs(values) * s / norm
    lower = np.floor(x)
    u = np.random.default_rng(seed).random(values.size)
    levels = np.clip(lower + (u < (x - lower)), 0, s).astype(np.uint64)
    return QuantizedTensor(levels, signs, 0.0, norm, s, v.layout)


def to_raw(v: ParameterVector) -> RawTensor:
    return RawTensor(v.values.astype(np.float32), v.layout)


def layout_metadata_bits(layout: Sequence[LayerSlice]) -> int:
    bits = 16
    for e in layout:
        bits += 16 + 8 * len(e.name.encode("utf-8")) + 8 + 32 * len(e.shape)
    return bits


def payload_bits(q) -> int:
    """Exact size in bits of the encoded tensor record, before byte padding."""
    meta = 8 + layout_metadata_bits(q.layout)
    if isinstance(q, RawTensor):
        return meta + REPR_BITS * q.n
    return meta + SCALAR_BITS + q.n * (level_bits(q.s) + 1)


def payload_bytes(q) -> int:
    return (payload_bits(q) + 7) // 8


def quantization_error_bound(q: QuantizedTensor) -> float:
    """Per-element worst case ``d / (2 s)`` of deterministic rounding."""
    return q.d / (2 * q.s)
