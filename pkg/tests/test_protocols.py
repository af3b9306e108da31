import numpy as np
import pytest

from slq.bench import oracle_query
from slq.paillier import Encrypter, decrypt, encrypt
from slq.primitives import Permutation, Prf, pack
from slq.protocols import (canonical_empty, encrypt_rank_query, fetch_masked, mark_and_extract,
                           merge_results, rank_to_point, return_results, sbp, slq_range_query, spe,
                           trapdoor)

from conftest import make_parties


def test_worked_example_replay(keys):
    dsp, dap = make_parties(keys, record_view=True)
    pk = keys.pk
    points = [[encrypt(pk, v)] for v in (11, 12, 13, 14, 15)]
    marks = [encrypt(pk, v) for v in (1, 0, 1, 0, 0)]
    perm = Permutation.from_one_based((5, 4, 3, 2, 1))
    noise = [[1], [9], [2], [7], [8]]
    results, trace = mark_and_extract(dsp, points, marks, sigma=2, perm=perm, noise=noise)
    assert [v for tag, v in dap.view if tag == "slq_nu"] == [17]
    assert pack([0, 0, 1, 0, 1], 2) == 17
    assert [[decrypt(keys, c) for c in u] for u in trace.upsilon] == [[0, 0, 1, 0, 0], [0, 0, 0, 0, 1]]
    assert [decrypt(keys, g[0]) for g in trace.gamma] == [2, 1]
    assert [decrypt(keys, r[0]) for r in results] == [13, 11]


def test_mark_and_extract_handles_chunks(keys, parties):
    dsp, _ = parties
    pk = keys.pk
    total = pk.plaintext_bits // 2 + 5
    marks = [int(i % 7 == 0) for i in range(total)]
    points = [[encrypt(pk, i), encrypt(pk, -i)] for i in range(total)]
    results, trace = mark_and_extract(dsp, points, [encrypt(pk, m) for m in marks])
    assert trace.chunks == 2
    got = sorted(tuple(decrypt(keys, c) for c in r) for r in results)
    assert got == [(i, -i) for i in range(total) if marks[i]]
    assert mark_and_extract(dsp, [], [])[0] == []


def _rank_query(owner, lo, hi, keys):
    rq = owner.table.rank_query(lo, hi)
    rlo, rhi = rq if rq is not None else canonical_empty(owner.d)
    return encrypt_rank_query(rlo, rhi, Encrypter(keys.pk, rng=Prf(5)))


def _truth(owner, lo, hi):
    return sorted(tuple(int(v) for v in owner.ranks[i]) for i in oracle_query(owner.raw, lo, hi))


@pytest.mark.parametrize("qid", range(4))
def test_range_query_matches_brute_force(keys, small_owner, qid):
    rng = np.random.default_rng(qid)
    c = rng.random(2)
    lo, hi = c - 0.06, c + 0.06
    dsp, _ = make_parties(keys, seed=qid)
    q = _rank_query(small_owner, lo, hi, keys)
    out = slq_range_query(dsp, small_owner.dsp, q)
    got = sorted(tuple(decrypt(keys, c) for c in r) for r in out.results)
    assert got == _truth(small_owner, lo, hi)
    assert out.candidates >= len(got)


def test_empty_query_returns_nothing(keys, small_owner):
    dsp, _ = make_parties(keys, seed=9)
    q = _rank_query(small_owner, [2.0, 2.0], [3.0, 3.0], keys)
    assert slq_range_query(dsp, small_owner.dsp, q).results == []


def test_spe_superset(keys, small_owner):
    dsp, _ = make_parties(keys, seed=3)
    lo, hi = [0.3, 0.3], [0.45, 0.4]
    out = spe(dsp, small_owner.dsp, _rank_query(small_owner, lo, hi, keys))
    cands = {tuple(decrypt(keys, c) for c in p) for p in out.candidates}
    assert set(_truth(small_owner, lo, hi)) <= cands
    assert 1 <= out.beta[0] <= out.beta[1] <= small_owner.dsp.bucket_count


def _slice(owner, pid):
    leaf = owner.route(owner.point_ranks(pid))
    return leaf.lo, leaf.hi


def test_sbp_found_flag_and_shape(keys, small_owner):
    owner = small_owner
    where = owner.locate()
    pid = next(i for i in range(600)
               if owner.route(owner.point_ranks(i)).model.label(
                   owner.point_ranks(i), *_slice(owner, i)) == where[i])
    existing = [encrypt(keys.pk, int(v)) for v in owner.ranks[pid]]
    taken = {tuple(int(v) for v in r) for r in owner.ranks}
    absent = next((a, b) for a in range(1, 600) for b in range(1, 600) if (a, b) not in taken)
    missing = [encrypt(keys.pk, v) for v in absent]
    dsp1, _ = make_parties(keys, seed=1)
    dsp0, _ = make_parties(keys, seed=1)
    hit = sbp(dsp1, owner.dsp, existing)
    miss = sbp(dsp0, owner.dsp, missing)
    assert hit.found == 1 and miss.found == 0
    assert dsp1.session.transcript.shape() == dsp0.session.transcript.shape()
    s2 = hit.scale ** 2
    assert (decrypt(keys, hit.pred) + s2 // 2) // s2 == where[pid]


def test_return_and_merge(keys, small_owner):
    dsp, dap = make_parties(keys, seed=4)
    rows = [[encrypt(keys.pk, 5), encrypt(keys.pk, 6)], [encrypt(keys.pk, 7), encrypt(keys.pk, 8)]]
    share = return_results(dsp, rows, 2)
    d, masked = fetch_masked(dsp.session, share.token)
    assert d == 2 and merge_results(share, masked) == [(5, 6), (7, 8)]
    assert all(v > 100 for row in masked for v in row)
    with pytest.raises(ValueError):
        merge_results(share, masked[:1])
    from slq.transport import RemoteError

    with pytest.raises(RemoteError):
        fetch_masked(dsp.session, share.token)


def test_trapdoor_and_rank_to_point(keys, small_owner):
    owner = small_owner
    q = trapdoor([0.0, 0.0], [1.0, 1.0], owner.table, Encrypter(keys.pk))
    assert [decrypt(keys, c) for c in q.lo] == [1, 1]
    assert [decrypt(keys, c) for c in q.hi] == [600, 600]
    p = owner.raw[3]
    assert rank_to_point(owner.table, owner.point_ranks(3)) == tuple(float(v) for v in p)
    with pytest.raises(ValueError):
        trapdoor([0.0], [1.0], owner.table, Encrypter(keys.pk))


def test_dap_view_is_blinded(keys, small_owner):
    dsp, dap = make_parties(keys, seed=6, record_view=True)
    lo, hi = [0.2, 0.2], [0.35, 0.3]
    out = slq_range_query(dsp, small_owner.dsp, _rank_query(small_owner, lo, hi, keys))
    return_results(dsp, out.results, 2)
    tags = {t for t, _ in dap.view}
    assert {"sic", "sm", "relu", "sbp_ids", "sbp_match", "spe_bounds", "spe_theta", "spe_delta",
            "slq_nu", "return"} <= tags
    bound = len(small_owner.raw) + 1
    for tag, v in dap.view:
        if tag == "slq_nu":
            continue
        if tag == "relu" and v == 0:
            continue
        assert abs(v) > bound, (tag, v)
