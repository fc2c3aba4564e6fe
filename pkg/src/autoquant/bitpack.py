"""Bit pack: contiguous bit-addressed storage for arbitrary-width fields.

Fields of one element are laid out back to back with no alignment, LSB
first inside each physical word; a field may straddle two words, in which
case its low bits live in the earlier word.  Elements start on a fresh word.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

_MAGIC = b"BPAK"
_VERSION = 1


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    name: str
    width: int
    offset: int


@dataclass(frozen=True)
class PackLayout:
    word_bits: int
    fields: tuple[Field, ...]

    @property
    def total_bits(self) -> int:
        return sum(f.width for f in self.fields)

    @property
    def words_needed(self) -> int:
        return -(-self.total_bits // self.word_bits)

    @property
    def wasted_bits(self) -> int:
        return self.words_needed * self.word_bits - self.total_bits

    def field(self, name: str) -> Field:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(f"unknown field {name!r}")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]


def plan_layout(widths: Iterable[tuple[str, int]], word_bits: int = 64) -> PackLayout:
    if word_bits not in (32, 64):
        raise LayoutError("word_bits must be 32 or 64")
    fields = []
    seen = set()
    offset = 0
    for name, width in widths:
        if not 1 <= width <= word_bits:
            raise LayoutError(f"field {name!r}: width {width} not in [1, {word_bits}]")
        if name in seen:
            raise LayoutError(f"duplicate field {name!r}")
        seen.add(name)
        fields.append(Field(name, int(width), offset))
        offset += width
    return PackLayout(word_bits, tuple(fields))


def bit_struct_words(widths: Sequence[int], word_bits: int = 64) -> int:
    """Words used by a no-straddle packing (first fit in declaration order).

    This is the bit-struct baseline: a field that does not fit in the
    remaining bits of the current word starts a new word.
    """
    words, used = 0, word_bits
    for w in widths:
        if w > word_bits:
            raise LayoutError(f"width {w} exceeds word size")
        if used + w > word_bits:
            words += 1
            used = 0
        used += w
    return words


def to_unsigned(values, width: int) -> np.ndarray:
    """Two's-complement payload of signed integers in ``width`` bits."""
    v = np.asarray(values, dtype=np.int64)
    if width == 64:
        return v.view(np.uint64)
    return (v & np.int64((1 << width) - 1)).astype(np.uint64)


def sign_extend(raw, width: int) -> np.ndarray:
    r = np.asarray(raw, dtype=np.uint64)
    if width == 64:
        return r.view(np.int64)
    sign = np.uint64(1 << (width - 1))
    return ((r ^ sign).astype(np.int64) - np.int64(1 << (width - 1)))


class PackedBuffer:
    def __init__(self, layout: PackLayout, count: int):
        if count < 0:
            raise ValueError("element count must be non-negative")
        self.layout = layout
        self.count = int(count)
        self._dtype = np.uint32 if layout.word_bits == 32 else np.uint64
        self.words = np.zeros(self.count * layout.words_needed, dtype=self._dtype)
        self._all = np.arange(self.count, dtype=np.int64)
        self._column_pos: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def nbytes(self) -> int:
        return self.words.nbytes

    def _check_index(self, index: int) -> None:
        if not 0 <= index < self.count:
            raise IndexError(f"element {index} out of range [0, {self.count})")

    def _positions(self, f: Field, idx: np.ndarray):
        if idx is self._all:
            cached = self._column_pos.get(f.name)
            if cached is not None:
                return cached
        wb = self.layout.word_bits
        start = idx * (self.layout.words_needed * wb) + f.offset
        pos = start // wb, (start % wb).astype(np.uint64)
        if idx is self._all:
            self._column_pos[f.name] = pos
        return pos

    def _load(self, f: Field, idx: np.ndarray) -> np.ndarray:
        wb = self.layout.word_bits
        w0, shift = self._positions(f, idx)
        lo = self.words[w0].astype(np.uint64) >> shift
        low_bits = wb - (f.offset % wb)
        if f.width > low_bits:
            # the field straddles into the next word
            hi = self.words[w0 + 1].astype(np.uint64) << np.uint64(low_bits)
            lo = lo | hi
        mask = np.uint64((1 << f.width) - 1)
        return lo & mask

    def _store(self, f: Field, idx: np.ndarray, raw: np.ndarray) -> None:
        wb = self.layout.word_bits
        word_mask = (1 << wb) - 1
        fmask = (1 << f.width) - 1
        w0, shift = self._positions(f, idx)
        s = f.offset % wb
        low_bits = wb - s
        m0 = self._dtype((fmask << s) & word_mask)
        part0 = ((raw << np.uint64(s)) & np.uint64(word_mask)).astype(self._dtype)
        self.words[w0] = (self.words[w0] & ~m0) | part0
        if f.width > low_bits:
            m1 = self._dtype(fmask >> low_bits)
            part1 = (raw >> np.uint64(low_bits)).astype(self._dtype)
            self.words[w0 + 1] = (self.words[w0 + 1] & ~m1) | part1

    def store_field(self, index: int, name: str, raw: int) -> None:
        f = self.layout.field(name)
        self._check_index(index)
        raw = int(raw)
        if not 0 <= raw < (1 << f.width):
            raise ValueError(f"value {raw} does not fit in {f.width} bits")
        self._store(f, np.array([index]), np.array([raw], dtype=np.uint64))

    def load_field(self, index: int, name: str) -> int:
        f = self.layout.field(name)
        self._check_index(index)
        return int(self._load(f, np.array([index]))[0])

    def store_column(self, name: str, raw) -> None:
        """Store one field for every element at once."""
        f = self.layout.field(name)
        raw = np.asarray(raw, dtype=np.uint64)
        if raw.shape != (self.count,):
            raise ValueError(f"expected {self.count} values, got shape {raw.shape}")
        if f.width < 64 and np.any(raw >> np.uint64(f.width)):
            raise ValueError(f"values do not fit in {f.width} bits")
        self._store(f, self._all, raw)

    def load_column(self, name: str) -> np.ndarray:
        return self._load(self.layout.field(name), self._all)

    def store_signed(self, name: str, values) -> None:
        self.store_column(name, to_unsigned(values, self.layout.field(name).width))

    def load_signed(self, name: str) -> np.ndarray:
        return sign_extend(self.load_column(name), self.layout.field(name).width)

    # -- serialization -----------------------------------------------------

    def dump(self, fp: BinaryIO) -> None:
        fp.write(_MAGIC)
        fp.write(struct.pack("<HHIQ", _VERSION, self.layout.word_bits, len(self.layout.fields), self.count))
        for f in self.layout.fields:
            name = f.name.encode("utf-8")
            fp.write(struct.pack("<H", len(name)))
            fp.write(name)
            fp.write(struct.pack("<H", f.width))
        le = "<u4" if self.layout.word_bits == 32 else "<u8"
        fp.write(self.words.astype(le).tobytes())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.dump(buf)
        return buf.getvalue()

    @classmethod
    def restore(cls, fp: BinaryIO) -> "PackedBuffer":
        if fp.read(4) != _MAGIC:
            raise LayoutError("not a bit pack dump")
        version, word_bits, nfields, count = struct.unpack("<HHIQ", fp.read(16))
        if version != _VERSION:
            raise LayoutError(f"unsupported dump version {version}")
        widths = []
        for _ in range(nfields):
            (n,) = struct.unpack("<H", fp.read(2))
            name = fp.read(n).decode("utf-8")
            (w,) = struct.unpack("<H", fp.read(2))
            widths.append((name, w))
        buf = cls(plan_layout(widths, word_bits), count)
        le = "<u4" if word_bits == 32 else "<u8"
        data = fp.read(buf.words.size * buf.words.itemsize)
        if len(data) != buf.words.nbytes:
            raise LayoutError("truncated word array")
        buf.words[:] = np.frombuffer(data, dtype=le)
        return buf

    @classmethod
    def from_bytes(cls, data: bytes) -> "PackedBuffer":
        return cls.restore(io.BytesIO(data))
