"""Deterministic entropy coder for integer symbols with quantized CDF tables.

The coder is a byte-wise streaming rANS variant: all state updates are
integer-only (state always fits in 64 bits), so identical inputs produce
identical bytes on every platform.  Symbols are consumed by the decoder in
encoding order; internally the encoder processes them in reverse, which is
invisible to callers.

Out-of-support values are handled with an escape symbol followed by the raw
value coded as two bypass bytes (16-bit two's complement), so any integer in
[-32768, 32767] is codable regardless of table support.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import TruncatedStreamError

# Lower bound of the coder state; with byte renormalization the state stays
# in [STATE_LOW, STATE_LOW << 8), i.e. below 2^31.
STATE_BITS = 23
STATE_LOW = 1 << STATE_BITS

MIN_PRECISION = 8
MAX_PRECISION = 16

RAW_VALUE_BITS = 16
_RAW_BIAS = 1 << (RAW_VALUE_BITS - 1)


@dataclass(frozen=True)
class CdfTable:
    """Quantized cumulative frequency table over a contiguous integer support.

    ``cdf`` has ``num_symbols + 1`` strictly increasing entries starting at 0
    and ending at ``2**precision``.  Symbol index ``i`` covers the integer
    value ``offset + i``; when ``has_escape`` is set the final index is the
    escape symbol and carries no integer value of its own.
    """

    cdf: tuple[int, ...]
    offset: int
    precision: int
    has_escape: bool = True

    def __post_init__(self):
        if not MIN_PRECISION <= self.precision <= MAX_PRECISION:
            raise ValueError(f"precision must be in [{MIN_PRECISION}, {MAX_PRECISION}]")
        if self.cdf[0] != 0 or self.cdf[-1] != (1 << self.precision):
            raise ValueError("cdf must start at 0 and end at 2**precision")
        if any(b <= a for a, b in zip(self.cdf, self.cdf[1:])):
            raise ValueError("cdf must be strictly increasing")

    @property
    def num_symbols(self) -> int:
        return len(self.cdf) - 1

    @property
    def escape_index(self) -> int:
        if not self.has_escape:
            return -1
        return self.num_symbols - 1

    @property
    def support(self) -> tuple[int, int]:
        """Inclusive integer range covered without escaping."""
        return self.offset, self.offset + self.num_symbols - 1 - int(self.has_escape)

    def symbol_for_value(self, value: int) -> int:
        lo, hi = self.support
        if lo <= value <= hi:
            return value - lo
        if not self.has_escape:
            raise ValueError(f"value {value} outside table support [{lo}, {hi}]")
        return self.escape_index

    def value_for_symbol(self, symbol: int) -> int:
        if self.has_escape and symbol == self.escape_index:
            raise ValueError("escape symbol carries no value")
        return self.offset + symbol

    def freq(self, symbol: int) -> int:
        return self.cdf[symbol + 1] - self.cdf[symbol]


@dataclass
class SymbolStream:
    """Integer values paired with the table used to code each one.

    ``table_ids`` indexes into ``tables`` per value; a single-element list
    broadcasts to all values.
    """

    values: Sequence[int]
    tables: Sequence[CdfTable]
    table_ids: Sequence[int] | None = None

    def resolved_table_ids(self) -> Sequence[int]:
        if self.table_ids is None:
            if len(self.tables) != 1:
                raise ValueError("table_ids required with more than one table")
            return [0] * len(self.values)
        if len(self.table_ids) != len(self.values):
            raise ValueError("table_ids length must match values")
        return self.table_ids


@dataclass
class CodedBytes:
    payload: bytes
    symbol_count: int = field(default=0)


def _flush(state: int, renorm: list[int]) -> bytes:
    head = state.to_bytes(4, "little")
    renorm.reverse()
    return head + bytes(renorm)


def encode_symbols(stream: SymbolStream) -> CodedBytes:
    """Entropy-code a symbol stream to bytes.

    Values outside a table's support are escaped and stored raw; everything
    else costs close to its ideal codelength.  The payload for an empty
    stream is just the 4 flush bytes.
    """
    values = stream.values
    table_ids = stream.resolved_table_ids()
    tables = stream.tables

    # rANS is last-in first-out: walk the stream backwards so the decoder
    # produces values in their original order.
    state = STATE_LOW
    renorm: list[int] = []
    emit = renorm.append
    for i in range(len(values) - 1, -1, -1):
        value = int(values[i])
        table = tables[table_ids[i]]
        symbol = table.symbol_for_value(value)
        if table.has_escape and symbol == table.escape_index:
            if not -_RAW_BIAS <= value < _RAW_BIAS:
                raise ValueError(f"value {value} exceeds raw escape range")
            raw = value + _RAW_BIAS
            state = _put_raw_byte(state, raw & 0xFF, emit)
            state = _put_raw_byte(state, (raw >> 8) & 0xFF, emit)
        state = _put(state, table, symbol, emit)
    return CodedBytes(payload=_flush(state, renorm), symbol_count=len(values))


def _put(state: int, table: CdfTable, symbol: int, emit) -> int:
    freq = table.cdf[symbol + 1] - table.cdf[symbol]
    limit = ((STATE_LOW >> table.precision) << 8) * freq
    while state >= limit:
        emit(state & 0xFF)
        state >>= 8
    return ((state // freq) << table.precision) + (state % freq) + table.cdf[symbol]


def _put_raw_byte(state: int, byte: int, emit) -> int:
    # Bypass coding: a uniform 256-entry table at 8-bit precision costs
    # exactly 8 bits per byte.
    limit = (STATE_LOW >> 8) << 8
    while state >= limit:
        emit(state & 0xFF)
        state >>= 8
    return (state << 8) + byte


def decode_symbols(
    coded: CodedBytes | bytes,
    tables: Sequence[CdfTable],
    count: int,
    table_ids: Sequence[int] | None = None,
) -> list[int]:
    """Exact inverse of :func:`encode_symbols`.

    Raises :class:`TruncatedStreamError` when the payload ends early.
    """
    payload = coded.payload if isinstance(coded, CodedBytes) else coded
    if table_ids is None:
        if len(tables) != 1:
            raise ValueError("table_ids required with more than one table")
        table_ids = [0] * count
    elif len(table_ids) != count:
        raise ValueError("table_ids length must match count")

    if count == 0:
        return []
    if len(payload) < 4:
        raise TruncatedStreamError("unexpected end of stream")
    state = int.from_bytes(payload[:4], "little")
    pos = 4
    n = len(payload)
    out: list[int] = []
    append = out.append
    for i in range(count):
        table = tables[table_ids[i]]
        mask = (1 << table.precision) - 1
        cdf = table.cdf
        low = state & mask
        symbol = bisect_right(cdf, low) - 1
        state = (cdf[symbol + 1] - cdf[symbol]) * (state >> table.precision) + low - cdf[symbol]
        while state < STATE_LOW:
            if pos >= n:
                raise TruncatedStreamError("unexpected end of stream")
            state = (state << 8) | payload[pos]
            pos += 1
        if table.has_escape and symbol == table.escape_index:
            hi, state, pos = _get_raw_byte(state, payload, pos)
            lo, state, pos = _get_raw_byte(state, payload, pos)
            append(((hi << 8) | lo) - _RAW_BIAS)
        else:
            append(table.offset + symbol)
    return out


def _get_raw_byte(state: int, payload: bytes, pos: int):
    byte = state & 0xFF
    state >>= 8
    while state < STATE_LOW:
        if pos >= len(payload):
            raise TruncatedStreamError("unexpected end of stream")
        state = (state << 8) | payload[pos]
        pos += 1
    return byte, state, pos


def ideal_codelength_bits(stream: SymbolStream) -> float:
    """Shannon codelength of the stream under its own quantized tables.

    Escaped values count the escape symbol plus 16 raw bits.
    """
    table_ids = stream.resolved_table_ids()
    bits = 0.0
    for value, tid in zip(stream.values, table_ids):
        table = stream.tables[tid]
        symbol = table.symbol_for_value(int(value))
        p = table.freq(symbol) / (1 << table.precision)
        bits += -np.log2(p)
        if table.has_escape and symbol == table.escape_index:
            bits += RAW_VALUE_BITS
    return bits
