"""Wire format for model broadcasts and block-diff uploads, plus FedAvg.

Byte layout (all integers little-endian, see docs/wire_format.md)::

    message   := magic "FOBD" | version u8 | kind u8 | stage u8 | round u32
                 | [client_id u32, updates only] | count u16 | body
    update    := count x (name | tensor_count u16 | tensor_count x tensor)
    global    := count x tensor
    name      := length u16 | UTF-8 bytes
    tensor    := tag u8 | layout | tag-specific payload
    layout    := entries u16 | entries x (name | rank u8 | rank x extent u32)
    quantized := offset f64 | d f64 | s u64 | bit stream of n levels
                 (level_bits(s) bits each, LSB first) then n sign bits,
                 zero padded to a byte boundary
    raw       := n x float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .nn_model import Model, block_ranges
from .quantizer import (
    TAG_QUANTIZED,
    TAG_RAW,
    QuantizedTensor,
    RawTensor,
    dequantize,
    level_bits,
)
from .tensor_core import LayerSlice, ParameterVector, concat

MAGIC = b"FOBD"
VERSION = 1
KIND_UPDATE = 1
KIND_GLOBAL = 2
UPDATE_HEADER_BYTES = 17
GLOBAL_HEADER_BYTES = 13

Tensor = Union[QuantizedTensor, RawTensor]


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class BlockUpdateMessage:
    round: int
    client_id: int
    stage: int
    entries: tuple[tuple[str, tuple[Tensor, ...]], ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "entries", tuple((name, tuple(ts)) for name, ts in self.entries)
        )


@dataclass(frozen=True)
class GlobalModelMessage:
    round: int
    stage: int
    tensors: tuple[Tensor, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tensors", tuple(self.tensors))


# -- bit packing -------------------------------------------------------------

def pack_bits(levels: np.ndarray, signs: np.ndarray, width: int) -> bytes:
    levels = np.asarray(levels, dtype=np.uint64)
    shifts = np.arange(width, dtype=np.uint64)
    level_bits_ = ((levels[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).reshape(-1)
    sign_bits = (np.asarray(signs) < 0).astype(np.uint8)
    return np.packbits(np.concatenate([level_bits_, sign_bits]), bitorder="little").tobytes()


def unpack_bits(buf: bytes, n: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little", count=n * (width + 1))
    lv = bits[: n * width].reshape(n, width).astype(np.uint64)
    levels = np.bitwise_or.reduce(lv << np.arange(width, dtype=np.uint64), axis=1) if n else np.zeros(0, np.uint64)
    signs = np.where(bits[n * width:] == 1, -1, 1).astype(np.int8)
    return levels.astype(np.uint64), signs


# -- encoding ----------------------------------------------------------------

def _name(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"name too long: {s[:40]!r}...")
    return struct.pack("<H", len(raw)) + raw


def _encode_layout(layout: Sequence[LayerSlice]) -> bytes:
    out = [struct.pack("<H", len(layout))]
    for e in layout:
        out.append(_name(e.name))
        out.append(struct.pack("<B", len(e.shape)))
        out.append(struct.pack(f"<{len(e.shape)}I", *e.shape))
    return b"".join(out)


def encode_tensor(t: Tensor) -> bytes:
    if isinstance(t, RawTensor):
        return bytes([TAG_RAW]) + _encode_layout(t.layout) + t.values.astype("<f4").tobytes()
    head = bytes([TAG_QUANTIZED]) + _encode_layout(t.layout) + struct.pack("<ddQ", t.offset, t.d, t.s)
    return head + pack_bits(t.levels, t.signs, level_bits(t.s))


def encode(message) -> bytes:
    if isinstance(message, BlockUpdateMessage):
        parts = [
            MAGIC,
            struct.pack("<BBBIIH", VERSION, KIND_UPDATE, message.stage, message.round,
                        message.client_id, len(message.entries)),
        ]
        for name, tensors in message.entries:
            parts.append(_name(name))
            parts.append(struct.pack("<H", len(tensors)))
            parts.extend(encode_tensor(t) for t in tensors)
        return b"".join(parts)
    if isinstance(message, GlobalModelMessage):
        parts = [
            MAGIC,
            struct.pack("<BBBIH", VERSION, KIND_GLOBAL, message.stage, message.round, len(message.tensors)),
        ]
        parts.extend(encode_tensor(t) for t in message.tensors)
        return b"".join(parts)
    raise TypeError(f"cannot encode {type(message).__name__}")


# -- decoding ----------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DecodeError(f"truncated message: need {n} bytes", self.pos)
        out = self.buf[self.pos:self.pos + n].tobytes()
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (length,) = self.unpack("<H")
        start = self.pos
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("name is not valid UTF-8", start) from exc


def _decode_layout(r: _Reader) -> tuple[LayerSlice, ...]:
    (count,) = r.unpack("<H")
    layout = []
    pos = 0
    for _ in range(count):
        name = r.name()
        (rank,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{rank}I"))
        n = int(np.prod(shape, dtype=np.int64))
        layout.append(LayerSlice(name, pos, n, shape))
        pos += n
    return tuple(layout)


def _decode_tensor(r: _Reader) -> Tensor:
    start = r.pos
    (tag,) = r.unpack("<B")
    if tag not in (TAG_QUANTIZED, TAG_RAW):
        raise DecodeError(f"unknown tensor tag {tag}", start)
    layout = _decode_layout(r)
    n = sum(e.length for e in layout)
    if tag == TAG_RAW:
        values = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32)
        return RawTensor(values, layout)
    at = r.pos
    offset, d, s = r.unpack("<ddQ")
    if s < 1 or not d >= 0:
        raise DecodeError(f"invalid quantization scalars d={d} s={s}", at)
    width = level_bits(s)
    levels, signs = unpack_bits(r.take((n * (width + 1) + 7) // 8), n, width)
    if n and levels.max() > s:
        raise DecodeError("level exceeds s", at)
    return QuantizedTensor(levels, signs, offset, d, s, layout)


def decode(buf: bytes):
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise DecodeError("bad magic", 0)
    version, kind, stage = r.unpack("<BBB")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", 4)
    if kind == KIND_UPDATE:
        rnd, client_id, count = r.unpack("<IIH")
        entries = []
        for _ in range(count):
            name = r.name()
            (nt,) = r.unpack("<H")
            entries.append((name, tuple(_decode_tensor(r) for _ in range(nt))))
        msg = BlockUpdateMessage(rnd, client_id, stage, tuple(entries))
    elif kind == KIND_GLOBAL:
        rnd, count = r.unpack("<IH")
        msg = GlobalModelMessage(rnd, stage, tuple(_decode_tensor(r) for _ in range(count)))
    else:
        raise DecodeError(f"unknown message kind {kind}", 5)
    if r.pos != len(r.buf):
        raise DecodeError(f"{len(r.buf) - r.pos} trailing bytes", r.pos)
    return msg


def describe(message) -> str:
    """Human-readable dump for debugging."""
    lines = []

    def tensor_line(t: Tensor) -> str:
        names = ",".join(f"{e.name}{list(e.shape)}" for e in t.layout)
        if isinstance(t, RawTensor):
            return f"    raw n={t.n} [{names}]"
        return (f"    adq n={t.n} s={t.s} d={t.d:.6g} offset={t.offset:.6g} "
                f"bits/elem={level_bits(t.s) + 1} [{names}]")

    if isinstance(message, BlockUpdateMessage):
        lines.append(f"update round={message.round} client={message.client_id} stage={message.stage}")
        for name, tensors in message.entries:
            lines.append(f"  block {name}")
            lines.extend(tensor_line(t) for t in tensors)
    else:
        lines.append(f"global round={message.round} stage={message.stage}")
        lines.extend(tensor_line(t) for t in message.tensors)
    lines.append(f"  encoded bytes={len(encode(message))}")
    return "\n".join(lines)


# -- model assembly ----------------------------------------------------------

def model_from_tensors(spec_model: Model, tensors: Sequence[Tensor]) -> Model:
    """Dequantize a broadcast into a model shaped like ``spec_model``."""
    params = concat([dequantize(t) for t in tensors])
    return Model(spec_model.spec, ParameterVector(params.values, spec_model.params.layout))


def reconstruct(global_prev: Model, update: BlockUpdateMessage) -> Model:
    """Add each uploaded block diff onto ``global_prev``; other blocks are copied."""
    ranges = block_ranges(global_prev.spec)
    values = global_prev.params.values.copy()
    layout = global_prev.params.layout
    for block_name, tensors in update.entries:
        if block_name not in ranges:
            raise KeyError(f"unknown block {block_name!r}")
        start, stop = ranges[block_name]
        delta = concat([dequantize(t) for t in tensors])
        expected = [(e.name, e.shape) for e in layout if start <= e.offset < stop]
        if [(e.name, e.shape) for e in delta.layout] != expected:
            raise ValueError(f"update for block {block_name!r} has the wrong layout")
        values[start:stop] = values[start:stop] + delta.values
    return global_prev.with_params(ParameterVector(values, layout))


def aggregate(models: Sequence[Model], sample_counts: Sequence[int]) -> Model:
    """Sample-count weighted average of parameters, summed in the given order."""
    if not models:
        raise ValueError("nothing to aggregate")
    if len(models) != len(sample_counts):
        raise ValueError("one sample count per model required")
    if any(c <= 0 for c in sample_counts):
        raise ValueError("sample counts must be positive")
    spec = models[0].spec
    if any(m.spec != spec for m in models):
        raise ValueError("models have different specs")
    total = float(sum(sample_counts))
    acc = np.zeros_like(models[0].params.values)
    for m, c in zip(models, sample_counts):
        acc += (c / total) * m.params.values
    return models[0].with_params(ParameterVector(acc, models[0].params.layout))


# -- accounting --------------------------------------------------------------

@dataclass
class TransmissionLedger:
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    messages: int = 0
    per_round: dict = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return self.uplink_bytes + self.downlink_bytes

    def record(self, direction: str, byte_count: int, key=None) -> "TransmissionLedger":
        if byte_count < 0:
            raise ValueError("byte count must be non-negative")
        slot = self.per_round.setdefault(key, {"uplink": 0, "downlink": 0})
        if direction == "uplink":
            self.uplink_bytes += byte_count
        elif direction == "downlink":
            self.downlink_bytes += byte_count
        else:
            raise ValueError(f"direction must be 'uplink' or 'downlink', got {direction!r}")
        slot[direction] += byte_count
        self.messages += 1
        return self


def record(ledger: TransmissionLedger, direction: str, byte_count: int, key=None) -> TransmissionLedger:
    return ledger.record(direction, byte_count, key)
