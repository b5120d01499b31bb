"""Count-min sketch with a fixed, cross-platform hash construction.

The sketch is a small grid of counters (5 rows x 55 columns by default)
plus a total-increment counter ``m``. Each row indexes values with its own
hash function; a point query returns the minimum counter across rows, so
estimates never fall below the true frequency but can overestimate when
values collide.

Hashing is deterministic everywhere: row ``i`` maps value ``v`` to column
``int(sha256(b"<i>:" + v)[:8]) mod width``. The row number acts as a fixed
public salt, which is what lets sketches produced on different machines be
merged counter-for-counter.

Counters are unsigned 64-bit on the wire. In memory they are plain ints
that saturate at 2**64 - 1 (and set ``saturated``) instead of wrapping.
"""

from __future__ import annotations

import hashlib
import json
import struct
from functools import lru_cache

from .errors import DecodeError, ShapeMismatch

DEPTH = 5
WIDTH = 55

_COUNTER_MAX = 2**64 - 1


def hash_index(row: int, value: bytes, width: int = WIDTH) -> int:
    """Column index of ``value`` in ``row``. Deterministic across processes."""
    digest = hashlib.sha256(b"%d:" % row + value).digest()
    return int.from_bytes(digest[:8], "big") % width


@lru_cache(maxsize=65536)
def _indices(value: bytes, depth: int, width: int) -> tuple[int, ...]:
    # One sha256 per row; the ASCII row number followed by ':' is the salt.
    out = []
    for row in range(depth):
        digest = hashlib.sha256(b"%d:" % row + value).digest()
        out.append(int.from_bytes(digest[:8], "big") % width)
    return tuple(out)


class CountMinSketch:
    """Frequency summary supporting increment, point query, and merge."""

    __slots__ = ("depth", "width", "rows", "m", "saturated")

    def __init__(self, depth: int = DEPTH, width: int = WIDTH):
        if depth < 1 or width < 1:
            raise ValueError(f"bad geometry ({depth}, {width})")
        self.depth = depth
        self.width = width
        self.rows: list[list[int]] = [[0] * width for _ in range(depth)]
        self.m = 0
        self.saturated = False

    def increment(self, value: bytes) -> None:
        """Add one observation of ``value``."""
        for row, col in enumerate(_indices(value, self.depth, self.width)):
            cell = self.rows[row]
            if cell[col] >= _COUNTER_MAX:
                self.saturated = True
            else:
                cell[col] += 1
        if self.m >= _COUNTER_MAX:
            self.saturated = True
        else:
            self.m += 1

    def count(self, value: bytes) -> int:
        """Estimated frequency of ``value``; never below the true count."""
        return min(
            self.rows[row][col]
            for row, col in enumerate(_indices(value, self.depth, self.width))
        )

    def merge(self, other: "CountMinSketch") -> "CountMinSketch":
        """Element-wise sum of two sketches with identical geometry."""
        if (self.depth, self.width) != (other.depth, other.width):
            raise ShapeMismatch(
                f"cannot merge ({self.depth},{self.width}) with "
                f"({other.depth},{other.width})"
            )
        out = CountMinSketch(self.depth, self.width)
        for i in range(self.depth):
            a, b, dst = self.rows[i], other.rows[i], out.rows[i]
            for j in range(self.width):
                total = a[j] + b[j]
                if total > _COUNTER_MAX:
                    total = _COUNTER_MAX
                    out.saturated = True
                dst[j] = total
        out.m = min(self.m + other.m, _COUNTER_MAX)
        out.saturated = out.saturated or self.saturated or other.saturated
        return out

    def copy(self) -> "CountMinSketch":
        out = CountMinSketch(self.depth, self.width)
        out.rows = [row[:] for row in self.rows]
        out.m = self.m
        out.saturated = self.saturated
        return out

    def counter_payload(self) -> bytes:
        """Raw counter section: big-endian u64 grid, row-major.

        With the default geometry this is 5 * 55 * 8 = 2200 bytes per key,
        independent of how many values were inserted.
        """
        flat = [c for row in self.rows for c in row]
        return struct.pack(f">{len(flat)}Q", *flat)

    def to_obj(self) -> dict:
        return {"r": self.depth, "n": self.width, "m": self.m, "rows": self.rows}

    @classmethod
    def from_obj(cls, obj: object, path: str = "sketch") -> "CountMinSketch":
        if not isinstance(obj, dict):
            raise DecodeError("sketch must be an object", path)
        for field in ("r", "n", "m", "rows"):
            if field not in obj:
                raise DecodeError(f"missing field {field!r}", path)
        depth, width = obj["r"], obj["n"]
        if not (isinstance(depth, int) and isinstance(width, int)):
            raise DecodeError("r and n must be integers", path)
        if (depth, width) != (DEPTH, WIDTH):
            raise ShapeMismatch(f"expected geometry ({DEPTH},{WIDTH}), got ({depth},{width})")
        rows = obj["rows"]
        if not isinstance(rows, list) or len(rows) != depth:
            raise DecodeError(f"rows must be a list of {depth} rows", f"{path}.rows")
        out = cls(depth, width)
        for i, row in enumerate(rows):
            if not isinstance(row, list) or len(row) != width:
                raise DecodeError(f"row must hold {width} counters", f"{path}.rows[{i}]")
            for j, c in enumerate(row):
                if not isinstance(c, int) or c < 0 or c > _COUNTER_MAX:
                    raise DecodeError("counter out of u64 range", f"{path}.rows[{i}][{j}]")
            out.rows[i] = list(row)
        m = obj["m"]
        if not isinstance(m, int) or m < 0 or m > _COUNTER_MAX:
            raise DecodeError("m out of u64 range", f"{path}.m")
        out.m = m
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "CountMinSketch":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DecodeError(str(exc.msg), f"offset {exc.pos}") from exc
        return cls.from_obj(obj)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CountMinSketch):
            return NotImplemented
        return (
            self.depth == other.depth
            and self.width == other.width
            and self.m == other.m
            and self.rows == other.rows
        )

    def __repr__(self) -> str:
        return f"CountMinSketch(depth={self.depth}, width={self.width}, m={self.m})"
