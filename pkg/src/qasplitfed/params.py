"""Named-segment parameter container and its binary encoding.

A :class:`ParamVector` is an ordered mapping ``name -> float64 array``. Model
parts (client front-end, server trunk, client back-end) each hold one, and
aggregation works on lists of compatible vectors.

Binary layout (all integers little-endian)::

    u32 segment_count
    repeat segment_count times:
        u32 name_length, name bytes (UTF-8)
        u32 rank, rank x u64 dims
        prod(dims) x f64 payload
"""

from __future__ import annotations

import hashlib
import math
import struct
from collections import OrderedDict
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DataError

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class ParamVector:
    """Ordered, named float64 segments.

    Arithmetic between two vectors requires them to be *compatible*: same
    segment names, same order, same shapes.
    """

    __slots__ = ("_segments",)

    def __init__(self, segments: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = segments.items() if isinstance(segments, Mapping) else segments
        self._segments: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, value in items:
            if name in self._segments:
                raise ConfigurationError(f"duplicate segment name {name!r}")
            self._segments[name] = np.array(value, dtype=np.float64, copy=True)

    # -- mapping-like access -------------------------------------------------
    def __getitem__(self, name: str) -> np.ndarray:
        return self._segments[name]

    def __contains__(self, name: object) -> bool:
        return name in self._segments

    def __iter__(self) -> Iterator[str]:
        return iter(self._segments)

    def __len__(self) -> int:
        return len(self._segments)

    def items(self):
        return self._segments.items()

    def names(self) -> list[str]:
        return list(self._segments)

    def shapes(self) -> list[tuple[int, ...]]:
        return [v.shape for v in self._segments.values()]

    @property
    def size(self) -> int:
        """Total number of scalars."""
        return int(sum(v.size for v in self._segments.values()))

    def __repr__(self) -> str:
        return f"ParamVector({len(self)} segments, {self.size} scalars)"

    # -- compatibility -------------------------------------------------------
    def compatible(self, other: "ParamVector") -> bool:
        if len(self) != len(other):
            return False
        for (n1, v1), (n2, v2) in zip(self.items(), other.items()):
            if n1 != n2 or v1.shape != v2.shape:
                return False
        return True

    def check_compatible(self, other: "ParamVector", what: str = "parameter vectors") -> None:
        if not self.compatible(other):
            mine = list(zip(self.names(), self.shapes()))
            theirs = list(zip(other.names(), other.shapes()))
            for a, b in zip(mine, theirs):
                if a != b:
                    raise ConfigurationError(f"incompatible {what}: segment {a} vs {b}")
            raise ConfigurationError(
                f"incompatible {what}: {len(mine)} vs {len(theirs)} segments")

    # -- arithmetic ----------------------------------------------------------
    def copy(self) -> "ParamVector":
        return ParamVector(self._segments)

    def zeros_like(self) -> "ParamVector":
        return ParamVector((n, np.zeros_like(v)) for n, v in self.items())

    def map(self, fn) -> "ParamVector":
        return ParamVector((n, fn(v)) for n, v in self.items())

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return ParamVector((n, v + other[n]) for n, v in self.items())

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return ParamVector((n, v - other[n]) for n, v in self.items())

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector((n, v * float(scalar)) for n, v in self.items())

    __rmul__ = __mul__

    def flat(self) -> np.ndarray:
        if not self._segments:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._segments.values()])

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        """Same layout, values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ConfigurationError(f"flat size {flat.size} != {self.size}")
        out, pos = [], 0
        for n, v in self.items():
            out.append((n, flat[pos:pos + v.size].reshape(v.shape)))
            pos += v.size
        return ParamVector(out)

    def subset(self, names: Iterable[str]) -> "ParamVector":
        return ParamVector((n, self._segments[n]) for n in names)

    def allclose(self, other: "ParamVector", atol: float = 0.0) -> bool:
        return self.compatible(other) and all(
            np.allclose(v, other[n], rtol=0.0, atol=atol) for n, v in self.items())

    def equal(self, other: "ParamVector") -> bool:
        return self.compatible(other) and all(
            np.array_equal(v, other[n]) for n, v in self.items())

    @staticmethod
    def merge(*parts: "ParamVector", order: Sequence[str] | None = None) -> "ParamVector":
        """Concatenate disjoint vectors, optionally reordering segments by name."""
        segs: list[tuple[str, np.ndarray]] = []
        for p in parts:
            segs.extend(p.items())
        merged = ParamVector(segs)
        return merged.subset(order) if order is not None else merged

    @staticmethod
    def linear_combination(vectors: Sequence["ParamVector"], coeffs: Sequence[float],
                           clip_to_hull: bool = False) -> "ParamVector":
        """Return ``sum_i coeffs[i] * vectors[i]``.

        Per scalar, the products are sorted before summation so the result does
        not depend on the order of ``vectors``. With ``clip_to_hull`` the result
        is clamped to the per-scalar [min, max] over the inputs, which removes
        rounding excursions of convex combinations.
        """
        if len(vectors) == 0:
            raise ConfigurationError("linear combination of zero vectors")
        if len(vectors) != len(coeffs):
            raise ConfigurationError(f"{len(vectors)} vectors but {len(coeffs)} coefficients")
        first = vectors[0]
        for v in vectors[1:]:
            first.check_compatible(v)
        coeffs = [float(c) for c in coeffs]
        out = []
        for name, ref in first.items():
            stack = np.stack([v[name] for v in vectors])
            terms = stack * np.asarray(coeffs).reshape((-1,) + (1,) * ref.ndim)
            if len(vectors) > 1:
                terms.sort(axis=0)
            value = terms.sum(axis=0)
            if clip_to_hull:
                value = np.clip(value, stack.min(axis=0), stack.max(axis=0))
            out.append((name, value))
        return ParamVector(out)

    # -- serialization -------------------------------------------------------
    def to_bytes(self) -> bytes:
        chunks = [_U32.pack(len(self))]
        for name, value in self.items():
            raw = name.encode("utf-8")
            chunks.append(_U32.pack(len(raw)))
            chunks.append(raw)
            chunks.append(_U32.pack(value.ndim))
            chunks.extend(_U64.pack(d) for d in value.shape)
            chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamVector":
        view = memoryview(blob)
        pos = 0

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise DataError("truncated parameter blob")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        (count,) = _U32.unpack(take(4))
        segs = []
        for _ in range(count):
            (name_len,) = _U32.unpack(take(4))
            name = bytes(take(name_len)).decode("utf-8")
            (rank,) = _U32.unpack(take(4))
            dims = tuple(_U64.unpack(take(8))[0] for _ in range(rank))
            n = math.prod(dims)
            data = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims)
            segs.append((name, data.astype(np.float64)))
        if pos != len(view):
            raise DataError(f"{len(view) - pos} trailing bytes in parameter blob")
        return cls(segs)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamVector":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
