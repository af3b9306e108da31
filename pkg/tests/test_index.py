import copy

import numpy as np
import pytest

from slq.bench import gen_dataset, owner_encrypter
from slq.index import (IndexConfig, IndexFormatError, OwnerIndex, PlainLeaf, RankTable, UpdateLog,
                       apply_delta, build_index, inject_dummies, load_delta, load_index,
                       load_rank_table, serialize_delta, serialize_index, should_rebuild)
from slq.paillier import decrypt


def test_tiny_dataset_is_one_leaf(keys):
    raw = np.random.default_rng(0).random((8, 2))
    owner = build_index(raw, keys.pk, IndexConfig(), enc=owner_encrypter(keys, 0))
    assert isinstance(owner.root, PlainLeaf)
    real = [bk for bk in owner.buckets if not bk.decoy]
    assert len(real) == 1 and len(real[0].live) == 8
    assert owner.audit() == []


def test_small_index_structure(small_owner):
    owner = small_owner
    owner.check_structure()
    assert owner.audit() == []
    assert len(owner.slice_leaves) > 1
    assert all(len(bk.slots) == owner.cfg.b for bk in owner.dsp.buckets)
    assert all(len(bk.slots) == owner.cfg.b for bk in owner.buckets)
    real = sum(1 for bk in owner.buckets if not bk.decoy)
    assert owner.dsp.bucket_count == real + int(np.ceil(0.1 * real))
    assert sorted(owner.locate()) == list(range(600))


def test_decoy_buckets_hold_sentinels(keys, small_owner):
    owner = small_owner
    pos = next(i for i, bk in enumerate(owner.buckets) if bk.decoy)
    enc = owner.dsp.buckets[pos]
    assert {decrypt(keys, c) for slot in enc.slots for c in slot} == {0}
    assert [decrypt(keys, c) for c in enc.mbr] == [0, 0, 0, 0]


def test_inject_dummies_counts():
    rng = np.random.default_rng(0)
    layout = inject_dummies([60, 40], 0.1, rng)
    assert len(layout) == 110 and sum(d for _, d in layout) == 10
    leaves = [leaf for leaf, _ in layout]
    assert leaves == sorted(leaves)
    assert sum(1 for leaf, d in layout if leaf == 0 and not d) == 60
    assert inject_dummies([5], 0, rng) == [(0, False)] * 5
    with pytest.raises(ValueError):
        inject_dummies([5], -0.1, rng)


def test_should_rebuild_threshold():
    assert not should_rebuild(UpdateLog(200, 200, 0.2), 2000)
    assert should_rebuild(UpdateLog(201, 200, 0.2), 2000)
    assert should_rebuild(UpdateLog(0, 0, 0.2, overflow=True), 2000)


def test_rank_table_queries():
    raw = np.array([[0.1, 0.5], [0.4, 0.2], [0.9, 0.9]])
    from slq.spatial import rank_map

    table = RankTable.from_points(raw, rank_map(raw))
    assert table.rank_query([0.0, 0.0], [1.0, 1.0]) == ([1, 1], [3, 3])
    assert table.rank_query([0.2, 0.1], [0.5, 0.6]) == ([2, 1], [2, 2])
    assert table.rank_query([0.5, 0.0], [0.6, 1.0]) is None
    assert table.rank_query([0.9, 0.9], [0.1, 0.1]) is None
    assert RankTable.from_json(table.to_json()).entries == table.entries


def test_serialization_round_trip(keys, small_owner):
    blob = serialize_index(small_owner.dsp, keys.pk)
    again = load_index(blob, keys.pk)
    assert serialize_index(again, keys.pk) == blob
    assert again.meta == small_owner.dsp.meta
    with pytest.raises(IndexFormatError):
        load_index(b"XXXX" + blob[4:], keys.pk)
    with pytest.raises(IndexFormatError):
        load_index(blob[:100], keys.pk)


def test_save_and_load(tmp_path, keys, small_owner):
    path = tmp_path / "idx.slq"
    small_owner.save(path)
    back = OwnerIndex.load(path, keys.pk)
    assert back.audit() == []
    assert serialize_index(back.dsp, keys.pk) == path.read_bytes()
    assert load_rank_table(path).entries == small_owner.table.entries


@pytest.fixture
def fresh_owner(keys):
    raw = gen_dataset("uni", 300, 2, seed=4)
    return build_index(raw, keys.pk, IndexConfig(m=100, seed=4), enc=owner_encrypter(keys, 4))


def test_insert_and_delete_keep_bounds(keys, fresh_owner):
    owner = fresh_owner
    mirror = load_index(serialize_index(owner.dsp, keys.pk), keys.pk)
    rng = np.random.default_rng(9)
    new_points = rng.random((30, 2)) * 0.98 + 0.01
    deltas = []
    before = len(owner.buckets)
    grown = 0
    for p in new_points:
        res = owner.insert(p)
        assert res.status == "inserted"
        grown += res.new_bucket
        deltas.append(res.delta)
    assert len(owner.buckets) == before + grown
    owner.check_structure()
    assert owner.audit() == []
    for p in new_points[:10]:
        res = owner.delete(p)
        assert res.status == "deleted"
        deltas.append(res.delta)
    assert owner.delete([5.0, 5.0]).status == "not_found"
    owner.check_structure()
    assert owner.audit() == []
    assert owner.n_live == 320
    for delta in deltas:
        apply_delta(mirror, load_delta(serialize_delta(delta, keys.pk), keys.pk))
    assert serialize_index(mirror, keys.pk) == serialize_index(owner.dsp, keys.pk)


def test_insert_fills_free_slot_first(keys, fresh_owner):
    owner = fresh_owner
    p = [0.5, 0.5]
    ranks, _ = copy.deepcopy(owner.table).insert(p)
    leaf = owner.route(ranks)
    target = leaf.model.label(ranks, leaf.lo, leaf.hi)
    had_room = owner.buckets[target - 1].free_slot() is not None
    res = owner.insert(p)
    assert res.new_bucket is (not had_room)
    assert res.bucket == (target if had_room else target + 1)


def test_delete_removes_emptied_bucket(keys, fresh_owner):
    owner = fresh_owner
    leaf = max(owner.slice_leaves, key=lambda lf: lf.hi - lf.lo)
    bid = next(b for b in range(leaf.lo, leaf.hi + 1) if owner.buckets[b - 1].live)
    count = len(owner.buckets)
    pts = [owner.raw[pid].copy() for pid in owner.buckets[bid - 1].live]
    results = [owner.delete(p) for p in pts]
    assert results[-1].removed_bucket
    assert len(owner.buckets) == count - 1
    owner.check_structure()
    assert owner.audit() == []


def test_rebuild_recommended_past_tau(keys, fresh_owner):
    owner = fresh_owner
    owner.log.inserts = 61
    assert owner.should_rebuild()
