import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slq.spatial import (MBR, assign_buckets, bucket_of, compute_mbr, curve_order, grid_partition,
                         grid_splits, morton_encode, morton_encode_array, morton_width, rank_map,
                         sentinel_mbr)


def test_morton_oracles():
    assert morton_encode((2, 3)) == 14
    assert morton_encode((1, 1)) == 3
    assert morton_encode((0, 0)) == 0


def test_morton_array_matches_scalar():
    ranks = np.array([[2, 3], [1, 1], [7, 5], [0, 6]])
    assert morton_encode_array(ranks, 3) == [morton_encode(r, 3) for r in ranks.tolist()]


def test_morton_rejects_overflow():
    with pytest.raises(ValueError):
        morton_encode((8, 1), width=3)


def test_rank_map_oracle():
    assert rank_map([(3, 7), (1, 9)]).tolist() == [[2, 1], [1, 2]]


def test_rank_map_ties_are_broken():
    r = rank_map([(1, 1), (1, 1), (1, 0)])
    assert sorted(r[:, 0].tolist()) == [1, 2, 3]
    assert sorted(r[:, 1].tolist()) == [1, 2, 3]
    assert r[2, 0] == 1  # equal x, smaller y first


def test_rank_map_rejects_empty():
    with pytest.raises(ValueError):
        rank_map(np.zeros((0, 2)))


def test_zrange_complete_exhaustive_8x8():
    w = morton_width(8)
    for x1, x2 in itertools.combinations_with_replacement(range(1, 9), 2):
        for y1, y2 in itertools.combinations_with_replacement(range(1, 9), 2):
            zlo, zhi = morton_encode((x1, y1), w), morton_encode((x2, y2), w)
            for x in range(x1, x2 + 1):
                for y in range(y1, y2 + 1):
                    assert zlo <= morton_encode((x, y), w) <= zhi


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 200), st.integers(1, 200), st.integers(1, 200)),
                min_size=2, max_size=2))
def test_zorder_monotone_in_each_dimension(pts):
    a, b = pts
    lo = tuple(min(x, y) for x, y in zip(a, b))
    hi = tuple(max(x, y) for x, y in zip(a, b))
    assert morton_encode(lo, 8) <= morton_encode(hi, 8)


def test_curve_order_sorted():
    ranks = rank_map(np.random.default_rng(0).random((50, 2)))
    order, codes = curve_order(ranks)
    zs = [codes[i] for i in order]
    assert zs == sorted(zs)


def test_buckets_and_mbrs():
    assert bucket_of(1, 8) == 1 and bucket_of(8, 8) == 1 and bucket_of(9, 8) == 2
    pts = [(i, 10 - i) for i in range(1, 11)]
    bks = assign_buckets(pts, 4)
    assert len(bks) == 3 and len(bks[-1].live) == 2 and bks[-1].free_slot() == 2
    assert bks[0].mbr(2) == MBR((1, 6), (4, 9))
    assert compute_mbr([], 2) == sentinel_mbr(2)
    assert MBR((1, 1), (3, 3)).intersects((3, 3), (5, 5))
    assert not MBR((1, 1), (3, 3)).intersects((4, 1), (5, 5))
    assert not sentinel_mbr(2).intersects((1, 1), (9, 9))


def test_grid_splits():
    assert grid_splits(300, 8) == 4
    assert grid_splits(20, 8) == 1
    assert grid_splits(1100, 8) == 8


def test_grid_partition_balanced():
    ranks = rank_map(np.random.default_rng(1).random((1600, 2)))
    spec, cells = grid_partition(ranks, 300, 8)
    assert spec.splits_per_dim == 4 and spec.cell_count == 16
    counts = np.bincount(cells, minlength=16)
    assert counts.min() == counts.max() == 100
