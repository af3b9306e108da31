"""Data-owner geometry: rank space, Z-curve order, buckets, MBRs, grids."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SENTINEL_RANK = 0


@dataclass(frozen=True)
class MBR:
    lo: tuple[int, ...]
    hi: tuple[int, ...]

    def contains(self, point: Sequence[int]) -> bool:
        return all(l <= x <= h for l, x, h in zip(self.lo, point, self.hi))

    def intersects(self, lo: Sequence[int], hi: Sequence[int]) -> bool:
        return all(max(a, c) <= min(b, e) for a, b, c, e in zip(self.lo, self.hi, lo, hi))

    def flat(self) -> list[int]:
        return list(self.lo) + list(self.hi)


def sentinel_mbr(d: int) -> MBR:
    return MBR((SENTINEL_RANK,) * d, (SENTINEL_RANK,) * d)


def rank_map(points) -> np.ndarray:
    """Per-dimension 1-based ranks.

    Ties in dimension ``j`` are broken by the remaining dimensions taken
    cyclically (``j+1, j+2, ...``) and finally by row index.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("expected a non-empty (n, d) array")
    n, d = pts.shape
    ranks = np.empty((n, d), dtype=np.int64)
    idx = np.arange(n)
    for j in range(d):
        keys = [idx] + [pts[:, (j + k) % d] for k in range(d - 1, -1, -1)]
        # np.lexsort sorts by the last key first
        order = np.lexsort(keys)
        ranks[order, j] = np.arange(1, n + 1)
    return ranks


def morton_width(n: int) -> int:
    return max(1, math.ceil(math.log2(n + 1)))


def morton_encode(ranks: Sequence[int], width: int | None = None) -> int:
    """Interleave bits: bit ``i`` of dimension ``j`` lands at ``i*d + j``."""
    d = len(ranks)
    if width is None:
        width = max(1, max(int(r).bit_length() for r in ranks))
    out = 0
    for j, r in enumerate(ranks):
        r = int(r)
        if r < 0 or r >> width:
            raise ValueError(f"rank {r} does not fit in {width} bits")
        for i in range(width):
            if (r >> i) & 1:
                out |= 1 << (i * d + j)
    return out


def morton_encode_array(ranks: np.ndarray, width: int) -> list[int]:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size and (ranks.min() < 0 or ranks.max() >> width):
        raise ValueError(f"ranks do not fit in {width} bits")
    n, d = ranks.shape
    if width * d <= 63:
        codes = np.zeros(n, dtype=np.int64)
        for i in range(width):
            for j in range(d):
                codes |= ((ranks[:, j] >> i) & 1) << (i * d + j)
        return [int(c) for c in codes]
    return [morton_encode(row, width) for row in ranks.tolist()]


def curve_order(ranks: np.ndarray, width: int | None = None) -> tuple[np.ndarray, list[int]]:
    """Indices sorted by Z value (ties by rank tuple), and the Z values."""
    ranks = np.asarray(ranks, dtype=np.int64)
    width = width or morton_width(int(ranks.max()))
    codes = morton_encode_array(ranks, width)
    order = sorted(range(len(codes)), key=lambda i: (codes[i], tuple(ranks[i])))
    return np.asarray(order, dtype=np.int64), codes


def bucket_of(ord_: int, b: int) -> int:
    """1-based bucket id of 1-based sorted position ``ord_``."""
    if b < 1:
        raise ValueError("bucket capacity must be at least 1")
    return -(-ord_ // b)


def compute_mbr(points: Sequence[Sequence[int]], d: int | None = None) -> MBR:
    pts = [tuple(int(x) for x in p) for p in points]
    if not pts:
        if d is None:
            raise ValueError("dimension needed for an empty bucket")
        return sentinel_mbr(d)
    lo = tuple(min(c) for c in zip(*pts))
    hi = tuple(max(c) for c in zip(*pts))
    return MBR(lo, hi)


@dataclass
class PlainBucket:
    """Plaintext bucket on the data-owner side; ``None`` marks a sentinel slot."""

    slots: list[tuple[int, ...] | None]
    deleted: list[bool]
    decoy: bool = False

    @property
    def live(self) -> list[tuple[int, ...]]:
        return [s for s in self.slots if s is not None]

    def free_slot(self) -> int | None:
        for i, s in enumerate(self.slots):
            if s is None:
                return i
        return None

    def mbr(self, d: int) -> MBR:
        return compute_mbr(self.live, d)


def assign_buckets(sorted_points: Sequence[Sequence[int]], b: int) -> list[PlainBucket]:
    """Chunk points already in curve order into buckets of capacity ``b``."""
    if b < 1:
        raise ValueError("bucket capacity must be at least 1")
    out = []
    for start in range(0, len(sorted_points), b):
        chunk = [tuple(int(x) for x in p) for p in sorted_points[start:start + b]]
        slots: list[tuple[int, ...] | None] = list(chunk) + [None] * (b - len(chunk))
        out.append(PlainBucket(slots, [False] * b))
    return out


@dataclass(frozen=True)
class GridSpec:
    splits_per_dim: int
    boundaries: list
    cell_count: int


def grid_splits(m: int, b: int, d: int = 2) -> int:
    """``2^floor(log_{2^d}(m/b))``; 1 means no grid."""
    ratio = m / b
    if ratio < 2 ** d:
        return 1
    e = int(math.floor(math.log(ratio, 2 ** d) + 1e-12))
    return 2 ** e


def _quantile_groups(order: np.ndarray, g: int) -> list[np.ndarray]:
    return [part for part in np.array_split(order, g)]


def grid_partition(ranks: np.ndarray, m: int, b: int) -> tuple[GridSpec, np.ndarray]:
    """Quantile grid over rank space; returns 0-based cell curve values per point.

    The first dimension is cut into ``g`` columns of near-equal counts, each
    column is cut along the next dimension, and so on.  Cells are numbered by
    the Z value of their grid coordinates.
    """
    ranks = np.asarray(ranks, dtype=np.int64)
    n, d = ranks.shape
    g = grid_splits(m, b, d)
    if g == 1:
        return GridSpec(1, [], 1), np.zeros(n, dtype=np.int64)
    coords = np.zeros((n, d), dtype=np.int64)
    boundaries: list = []

    def split(members: np.ndarray, dim: int) -> None:
        if dim == d or members.size == 0:
            return
        order = members[np.lexsort((members, ranks[members, dim]))]
        parts = _quantile_groups(order, g)
        boundaries.append((dim, [int(ranks[p[-1], dim]) for p in parts if p.size]))
        for c, part in enumerate(parts):
            coords[part, dim] = c
            split(part, dim + 1)

    split(np.arange(n), 0)
    width = max(1, int(math.log2(g)))
    cells = np.asarray(morton_encode_array(coords, width), dtype=np.int64)
    return GridSpec(g, boundaries, g ** d), cells
