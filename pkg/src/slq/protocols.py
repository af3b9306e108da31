"""Query protocols run by the DSP: bucket prediction, point extraction,
range query and the result split back to the client."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from .index import RankTable, SLQIndex
from .paillier import Ciphertext, Encrypter, hom_add, scalar_mul
from .predictors import SecurePredictor, eval_smlp_c, eval_smlp_p, select_leaf_fuzzy
from .primitives import (DspContext, Permutation, pack_ciphertexts, sqp_batch, srand)
from .transport import MsgType, Session

log = logging.getLogger(__name__)

BLIND_BITS = 40
PERTURB_BITS = 40
MBR_FIELD_BITS = 48
RETURN_MASK_BITS = 80
DEFAULT_SIGMA = 2


@dataclass
class EncRangeQuery:
    lo: list[Ciphertext]
    hi: list[Ciphertext]

    @property
    def d(self) -> int:
        return len(self.lo)


def canonical_empty(d: int) -> tuple[list[int], list[int]]:
    """Rank rectangle with ``lo > hi`` in every dimension: matches nothing."""
    return [2] * d, [1] * d


def trapdoor(lo: Sequence[float], hi: Sequence[float], table: RankTable,
             enc: Encrypter) -> EncRangeQuery:
    """Map a raw rectangle to rank space through the published boundaries and encrypt it."""
    if len(lo) != table.d or len(hi) != table.d:
        raise ValueError("query dimension does not match the index")
    rq = table.rank_query(lo, hi)
    rlo, rhi = rq if rq is not None else canonical_empty(table.d)
    return encrypt_rank_query(rlo, rhi, enc)


def encrypt_rank_query(rlo: Sequence[int], rhi: Sequence[int], enc: Encrypter) -> EncRangeQuery:
    return EncRangeQuery([enc.encrypt(int(v)) for v in rlo], [enc.encrypt(int(v)) for v in rhi])


# -- secure bucket prediction ----------------------------------------------

@dataclass
class SbpOutcome:
    """``pred`` is ``E(v)`` at scale ``S^2`` (the retained pre-blinding ciphertext)."""

    pred: Ciphertext
    found: int
    err: Ciphertext
    scale: int
    fetched: tuple[int, int] = (0, 0)


def select_leaf(dsp: DspContext, index: SLQIndex, x: Sequence[Ciphertext]) -> SecurePredictor:
    """Descend head and intermediates with SMLP_p; pick the leaf obliviously if fuzzy."""
    node = index.root
    if isinstance(node, SecurePredictor):
        return node
    while True:
        j = eval_smlp_p(dsp, node.model, x)
        r = node.routes[j - 1]
        if r >= 0:
            node = node.children[r]
            continue
        if index.meta.fuzzy:
            return select_leaf_fuzzy(dsp, node.fuzzy[j - 1], node.leaves)
        return node.leaves[node.leaf_pos[j - 1]]


def sbp(dsp: DspContext, index: SLQIndex, x: Sequence[Ciphertext]) -> SbpOutcome:
    pk = dsp.pk
    nb = index.bucket_count
    leaf = select_leaf(dsp, index, x)
    v = eval_smlp_c(dsp, leaf, x)
    s2 = leaf.scale * leaf.scale
    v_dummy = srand(dsp, 1, nb, v)

    r1 = dsp.prf.scalar(1 << BLIND_BITS)
    jitter = dsp.prf.randbelow(s2) - s2 // 2
    blinded = [dsp.enc.add_plain(v, r1 * s2),
               dsp.enc.add_plain(scalar_mul(v_dummy, s2), r1 * s2 + jitter)]
    w = dsp.session.writer().sint(s2).u32(2).cts(blinded)
    rd = dsp.session.request(MsgType.SBP_IDS, w)
    ids = [min(max(u - r1, 1), nb) for u in rd.sints(2)]
    rd.done()

    d = len(x)
    r2 = dsp.prf.scalar(1 << BLIND_BITS)
    pooled = [slot for bid in ids for slot in index.buckets[bid - 1].slots]
    pi = Permutation.random(len(pooled), dsp.prf)
    perturbed = [[dsp.enc.add_plain(c, r2) for c in slot] for slot in pi.apply(pooled)]
    w = dsp.session.writer().u32(d).u32(len(perturbed))
    w.cts(dsp.enc.add_plain(c, r2) for c in x)
    for slot in perturbed:
        w.cts(slot)
    rd = dsp.session.request(MsgType.SBP_MATCH, w)
    found = rd.u8()
    rd.done()
    dsp.stats["sbp"] += 1
    return SbpOutcome(v, found, leaf.err, leaf.scale, (ids[0], ids[1]))


# -- secure point extraction -----------------------------------------------

@dataclass
class SpeResult:
    candidates: list[list[Ciphertext]]
    beta: tuple[int, int]
    hits: int
    found: tuple[int, int]

    @property
    def width(self) -> int:
        return self.beta[1] - self.beta[0] + 1


def _widen(out: SbpOutcome, sign: int) -> Ciphertext:
    if out.found:
        return out.pred
    return hom_add(out.pred, scalar_mul(out.err, sign * out.scale * out.scale))


def spe(dsp: DspContext, index: SLQIndex, q: EncRangeQuery) -> SpeResult:
    pk = dsp.pk
    nb = index.bucket_count
    b, d = index.meta.b, index.meta.d
    low = sbp(dsp, index, q.lo)
    upp = sbp(dsp, index, q.hi)
    if low.scale != upp.scale:
        raise ValueError("leaf predictors disagree on fixed-point scale")
    s2 = low.scale * low.scale
    r1 = dsp.prf.scalar(1 << BLIND_BITS)
    bounds = [dsp.enc.add_plain(_widen(low, -1), r1 * s2), dsp.enc.add_plain(_widen(upp, 1), r1 * s2)]
    w = dsp.session.writer().sint(s2).cts(bounds)
    rd = dsp.session.request(MsgType.SPE_BOUNDS, w)
    beta = [min(max(u - r1, 1), nb) for u in rd.sints(2)]
    rd.done()
    beta_low, beta_upp = min(beta), max(beta)
    width = beta_upp - beta_low + 1
    scanned = index.buckets[beta_low - 1:beta_upp]

    noise = [[[dsp.prf.scalar(1 << PERTURB_BITS) for _ in range(d)] for _ in range(b)]
             for _ in range(width)]
    r2 = dsp.prf.scalar(1 << BLIND_BITS)
    pi = Permutation.random(width, dsp.prf)
    order = pi.mapping
    theta = pack_ciphertexts([dsp.enc.add_plain(c, r2) for c in list(q.lo) + list(q.hi)],
                             MBR_FIELD_BITS, pk)
    delta = pack_ciphertexts([dsp.enc.add_plain(c, r2) for j in order for c in scanned[j].mbr], MBR_FIELD_BITS, pk)
    w = dsp.session.writer().u32(d).u32(width).u32(b).u32(MBR_FIELD_BITS)
    w.u32(len(theta)).u32(len(delta))
    w.cts(dsp.enc.rerandomize(c) for c in theta)
    w.cts(dsp.enc.rerandomize(c) for c in delta)
    for j in order:
        for s, slot in enumerate(scanned[j].slots):
            w.cts(dsp.enc.add_plain(c, noise[j][s][k]) for k, c in enumerate(slot))
    rd = dsp.session.request(MsgType.SPE_FILTER, w)
    hits = rd.u32()
    onehots = [rd.cts(width) for _ in range(hits)]
    blocks = [rd.cts(b * d) for _ in range(hits)]
    rd.done()

    candidates = []
    for u, block in zip(onehots, blocks):
        u_orig = pi.invert(u)
        for s in range(b):
            point = []
            for k in range(d):
                theta_sk = None
                for j, uj in enumerate(u_orig):
                    term = scalar_mul(uj, noise[j][s][k])
                    theta_sk = term if theta_sk is None else hom_add(theta_sk, term)
                point.append(hom_add(block[s * d + k], scalar_mul(theta_sk, -1)))
            candidates.append(point)
    dsp.stats["spe"] += 1
    return SpeResult(candidates, (beta_low, beta_upp), hits, (low.found, upp.found))


# -- range query -----------------------------------------------------------

@dataclass
class MarkTrace:
    perm: Permutation
    noise: list[list[int]]
    upsilon: list[list[Ciphertext]] = field(default_factory=list)
    gamma: list[list[Ciphertext]] = field(default_factory=list)
    chunks: int = 0


def mark_and_extract(dsp: DspContext, candidates: Sequence[Sequence[Ciphertext]],
                     bits: Sequence[Ciphertext], sigma: int = DEFAULT_SIGMA,
                     perm: Permutation | None = None, noise: Sequence[Sequence[int]] | None = None
                     ) -> tuple[list[list[Ciphertext]], MarkTrace]:
    """Send packed permuted indicators and perturbed candidates; strip the noise from the marked ones."""
    total = len(candidates)
    d = len(candidates[0]) if candidates else 0
    pk = dsp.pk
    if noise is None:
        noise = [[dsp.prf.scalar(1 << PERTURB_BITS) for _ in range(d)] for _ in range(total)]
    if perm is None:
        perm = Permutation.random(total, dsp.prf)
    trace = MarkTrace(perm, [list(r) for r in noise])
    if total == 0:
        return [], trace
    perturbed = [[dsp.enc.add_plain(c, noise[i][k]) for k, c in enumerate(p)]
                 for i, p in enumerate(candidates)]
    chunks = pack_ciphertexts(perm.apply(list(bits)), sigma, pk)
    trace.chunks = len(chunks)
    w = dsp.session.writer().u32(total).u32(d).u32(sigma).u32(len(chunks))
    w.cts(dsp.enc.rerandomize(c) for c in chunks)
    for p in perm.apply(perturbed):
        w.cts(p)
    rd = dsp.session.request(MsgType.SLQ_MARK, w)
    k = rd.u32()
    ups = [rd.cts(total) for _ in range(k)]
    marked = [rd.cts(d) for _ in range(k)]
    rd.done()
    results = []
    for u, pt in zip(ups, marked):
        u_orig = perm.invert(u)
        gamma = []
        for c in range(d):
            acc = None
            for j, uj in enumerate(u_orig):
                term = scalar_mul(uj, noise[j][c])
                acc = term if acc is None else hom_add(acc, term)
            gamma.append(acc)
        trace.upsilon.append(u)
        trace.gamma.append(gamma)
        results.append([hom_add(pt[c], scalar_mul(gamma[c], -1)) for c in range(d)])
    return results, trace


@dataclass
class QueryOutcome:
    results: list[list[Ciphertext]]
    beta: tuple[int, int]
    candidates: int
    hits: int
    found: tuple[int, int]

    @property
    def width(self) -> int:
        return self.beta[1] - self.beta[0] + 1


def slq_range_query(dsp: DspContext, index: SLQIndex, q: EncRangeQuery,
                    sigma: int = DEFAULT_SIGMA) -> QueryOutcome:
    extracted = spe(dsp, index, q)
    cands = extracted.candidates
    if not cands:
        return QueryOutcome([], extracted.beta, 0, extracted.hits, extracted.found)
    bits = sqp_batch(dsp, cands, q.lo, q.hi)
    results, _ = mark_and_extract(dsp, cands, bits, sigma)
    dsp.stats["query"] += 1
    return QueryOutcome(results, extracted.beta, len(cands), extracted.hits, extracted.found)


# -- Return -------------------------------------------------------------------

@dataclass
class ClientShare:
    """What the DSP hands the client: the mailbox token and the masks."""

    token: bytes
    d: int
    masks: list[list[int]]


def return_results(dsp: DspContext, results: Sequence[Sequence[Ciphertext]], d: int) -> ClientShare:
    """Mask every coordinate, park the masked ciphertexts at the DAP, keep the masks."""
    token = dsp.prf.randbelow(1 << 128).to_bytes(16, "big")
    masks = [[dsp.prf.randbelow(1 << RETURN_MASK_BITS) for _ in range(d)] for _ in results]
    w = dsp.session.writer().raw(token).u32(len(results)).u32(d)
    for row, mrow in zip(results, masks):
        w.cts(dsp.enc.add_plain(c, m) for c, m in zip(row, mrow))
    rd = dsp.session.request(MsgType.RETURN, w)
    stored = rd.u32()
    rd.done()
    if stored != len(results):
        raise ValueError("DAP stored a different number of results")
    return ClientShare(token, d, masks)


def fetch_masked(session: Session, token: bytes) -> tuple[int, list[list[int]]]:
    rd = session.request(MsgType.FETCH, session.writer().raw(token))
    count = rd.u32()
    d = rd.u32()
    rows = [rd.sints(d) for _ in range(count)]
    rd.done()
    return d, rows


def merge_results(share: ClientShare, masked: Sequence[Sequence[int]]) -> list[tuple[int, ...]]:
    if len(masked) != len(share.masks):
        raise ValueError(f"result count mismatch: {len(masked)} masked rows, {len(share.masks)} masks")
    return [tuple(v - m for v, m in zip(row, mrow)) for row, mrow in zip(masked, share.masks)]


def rank_to_point(table: RankTable, ranks: Sequence[int]) -> tuple[float, ...]:
    """Raw coordinates of a rank tuple through the published boundaries."""
    out = []
    for j, r in enumerate(ranks):
        e = table.entries[j]
        lo, hi = 0, len(e)
        while lo < hi:
            mid = (lo + hi) // 2
            if e[mid][1] < r:
                lo = mid + 1
            else:
                hi = mid
        if lo >= len(e) or e[lo][1] != r:
            raise KeyError(f"rank {r} not published in dimension {j}")
        out.append(e[lo][0])
    return tuple(out)

