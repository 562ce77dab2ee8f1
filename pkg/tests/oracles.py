"""Slow reference implementations used to cross-check the library.

Everything here is exact rational arithmetic over integer-microsecond
traces, written from the definitions rather than from the library code.
"""

from __future__ import annotations

from fractions import Fraction

US_PER_HOUR = 3_600_000_000


def anchors_of(curve) -> list[tuple[Fraction, Fraction]]:
    """Curve anchor points as exact (TB/s, $/h) pairs."""
    pts = [(Fraction(0), Fraction(curve.base_nd, 10**9))]
    pts += [(Fraction(bw), Fraction(cap, 10**9)) for bw, cap in curve.segments]
    return pts


def ppt(anchors, bw) -> Fraction:
    bw = Fraction(bw)
    for (x0, y0), (x1, y1) in zip(anchors, anchors[1:]):
        if x0 <= bw <= x1:
            return y0 + (y1 - y0) * (bw - x0) / (x1 - x0)
    raise ValueError(f"{bw} outside curve")


def ideal(durations, bws, anchors) -> Fraction:
    return sum((ppt(anchors, b) * d for d, b in zip(durations, bws)), Fraction(0)) / US_PER_HOUR


def _record_at(bounds, t):
    # record k covers [bounds[k], bounds[k+1])
    for k in range(len(bounds) - 1):
        if bounds[k] <= t < bounds[k + 1]:
            return k
    raise ValueError(t)


def sampled(durations, bws, anchors, period, mode) -> Fraction:
    """Walk every window explicitly; ``mode`` is 'instantaneous' or 'window-average'."""
    bounds = [0]
    for d in durations:
        bounds.append(bounds[-1] + d)
    total = bounds[-1]
    period = Fraction(period)
    bws = [Fraction(b) for b in bws]
    out = Fraction(0)
    t = Fraction(0)
    while t < total:
        end = min(t + period, total)
        if mode == "instantaneous":
            level = bws[_record_at(bounds, t)]
        else:
            area = Fraction(0)
            for k in range(len(durations)):
                lo, hi = max(t, bounds[k]), min(end, bounds[k + 1])
                if hi > lo:
                    area += bws[k] * (hi - lo)
            level = area / (end - t)
        out += ppt(anchors, level) * (end - t)
        t = end
    return out / US_PER_HOUR


def uvarint(n: int) -> bytes:
    """LEB128 encoding of one unsigned integer."""
    out = bytearray()
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def zigzag(n: int) -> int:
    return 2 * n if n >= 0 else -2 * n - 1


def compress(rows) -> bytes:
    """Field-major delta + zigzag + varint encoding of (bw, cu, du) rows."""
    out = bytearray()
    for f in range(3):
        prev = 0
        for r in rows:
            out += uvarint(zigzag(int(r[f]) - prev))
            prev = int(r[f])
    return bytes(out)
