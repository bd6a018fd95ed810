"""Integer-only 32-bit range coder (carryless Subbotin style).

State is a 32-bit (low, range) pair. Each coding step narrows the range in
proportion to the symbol's quantized frequency; renormalization emits the
top byte whenever it is settled, and the classic range clamp
``range = -low & (BOTTOM - 1)`` resolves straddling without carries. All
arithmetic is exact integer work, so streams are byte-identical across
runs and platforms.

Frequencies are quantized to a fixed power-of-two total well below the
2^16 renormalization floor, which keeps the floor-division rate loss far
under a percent.
"""

from __future__ import annotations

import numpy as np

MASK = (1 << 32) - 1
TOP = 1 << 24
BOTTOM = 1 << 16


class RangeCoderError(ValueError):
    pass


def _check_symbols(symbols: np.ndarray, model) -> np.ndarray:
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size and (symbols.min() < model.lo or symbols.max() > model.hi):
        raise RangeCoderError("symbol outside the model alphabet")
    return symbols


def ac_encode(symbols, model) -> bytes:
    """Arithmetic-code an integer symbol stream under one model."""
    return encode_segments([(symbols, model)])


def ac_decode(data: bytes, model, count: int):
    """Exact inverse of :func:`ac_encode` given the symbol count."""
    return decode_segments(data, [(count, model)])[0]


def encode_segments(segments) -> bytes:
    """Encode consecutive symbol segments, each under its own model,
    into a single range-coded stream (one 4-byte flush total)."""
    low = 0
    rng = MASK
    out = bytearray()
    for symbols, model in segments:
        symbols = _check_symbols(symbols, model)
        cum = model.cumfreq
        freqs = model.freqs
        total = int(model.total)
        lo_sym = model.lo
        for s in symbols:
            i = int(s) - lo_sym
            r = rng // total
            low = low + int(cum[i]) * r
            rng = int(freqs[i]) * r
            while True:
                if (low ^ (low + rng)) < TOP:
                    pass
                elif rng < BOTTOM:
                    rng = (-low) & (BOTTOM - 1)
                else:
                    break
                out.append((low >> 24) & 0xFF)
                low = (low << 8) & MASK
                rng = (rng << 8) & MASK
    for _ in range(4):
        out.append((low >> 24) & 0xFF)
        low = (low << 8) & MASK
    return bytes(out)


def decode_segments(data: bytes, layout):
    """Decode segments described by (count, model) pairs from one stream."""
    pos = 0
    n_bytes = len(data)

    def next_byte():
        nonlocal pos
        if pos >= n_bytes:
            raise RangeCoderError("truncated range-coded stream")
        b = data[pos]
        pos += 1
        return b

    total_symbols = sum(int(c) for c, _ in layout)
    if total_symbols == 0:
        return [np.zeros(0, dtype=np.int64) for _ in layout]

    low = 0
    rng = MASK
    code = 0
    for _ in range(4):
        code = ((code << 8) | next_byte()) & MASK

    out = []
    for count, model in layout:
        cum = model.cumfreq
        freqs = model.freqs
        total = int(model.total)
        lo_sym = model.lo
        seg = np.empty(int(count), dtype=np.int64)
        for k in range(int(count)):
            r = rng // total
            v = (code - low) // r
            if v >= total:
                v = total - 1
            i = int(np.searchsorted(cum, v, side="right")) - 1
            seg[k] = i + lo_sym
            low = low + int(cum[i]) * r
            rng = int(freqs[i]) * r
            while True:
                if (low ^ (low + rng)) < TOP:
                    pass
                elif rng < BOTTOM:
                    rng = (-low) & (BOTTOM - 1)
                else:
                    break
                code = ((code << 8) | next_byte()) & MASK
                low = (low << 8) & MASK
                rng = (rng << 8) & MASK
        out.append(seg)
    return out
