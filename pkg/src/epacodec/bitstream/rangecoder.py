"""32-bit carry-less range coder (Subbotin style) with byte-wise renormalization.

Frequencies are integers summing to ``2**PRECISION``; ``cum`` tables hold the
running sum with ``cum[0] == 0`` and ``cum[-1] == 2**PRECISION``.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
BOT = 1 << 16
MASK = 0xFFFFFFFF


class RangeCoderError(ValueError):
    pass


def range_encode(symbols: Sequence[int], cums: Sequence[Sequence[int]], table_ids: Sequence[int]) -> bytes:
    """Encode symbol indices; symbol ``i`` uses cumulative table ``cums[table_ids[i]]``.

    Symbols are indices into the table (0 .. len(cum) - 2).
    """
    if len(symbols) != len(table_ids):
        raise RangeCoderError("symbols and table ids differ in length")
    out = bytearray()
    low = 0
    rng = MASK
    for s, tid in zip(symbols, table_ids):
        cum = cums[tid]
        if s < 0 or s >= len(cum) - 1:
            raise RangeCoderError(f"symbol index {s} outside table support 0..{len(cum) - 2}")
        lo_c = cum[s]
        freq = cum[s + 1] - lo_c
        r = rng >> PRECISION
        low = (low + lo_c * r) & MASK
        rng = freq * r
        while True:
            if (low ^ (low + rng)) >= TOP:
                if rng >= BOT:
                    break
                rng = (-low) & (BOT - 1)
            out.append(low >> 24)
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
    for _ in range(4):
        out.append(low >> 24)
        low = (low << 8) & MASK
    return bytes(out)


def range_decode(data: bytes, cums: Sequence[Sequence[int]], table_ids: Sequence[int]) -> list[int]:
    """Inverse of :func:`range_encode`; decodes ``len(table_ids)`` symbols."""
    n = len(data)
    pos = 0
    code = 0
    for _ in range(4):
        code = (code << 8) | (data[pos] if pos < n else 0)
        pos += 1
    low = 0
    rng = MASK
    out = []
    for tid in table_ids:
        cum = cums[tid]
        r = rng >> PRECISION
        target = ((code - low) & MASK) // r
        if target >= TOTAL:
            raise RangeCoderError(f"corrupt range-coded data near byte {pos}")
        s = bisect_right(cum, target) - 1
        lo_c = cum[s]
        low = (low + lo_c * r) & MASK
        rng = (cum[s + 1] - lo_c) * r
        while True:
            if (low ^ (low + rng)) >= TOP:
                if rng >= BOT:
                    break
                rng = (-low) & (BOT - 1)
            code = ((code << 8) | (data[pos] if pos < n else 0)) & MASK
            pos += 1
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        out.append(s)
    if pos > n:
        raise RangeCoderError(f"range-coded payload truncated: read past end ({n} bytes)")
    return out
