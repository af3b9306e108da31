"""SLQ index: build, DSP-view serialization, updates and audits.

The data owner keeps an :class:`OwnerIndex`: the plaintext mirror (points,
quantized models, bucket contents) together with the encrypted
:class:`SLQIndex` that the DSP holds.  Updates change both and return a
:class:`Delta` that brings a DSP copy to the same bytes.
"""
from __future__ import annotations

import bisect
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .paillier import Ciphertext, Encrypter, PublicKey, deserialize_ct, serialize_ct
from .predictors import (DEFAULT_SCALE, QuantMlp, SecurePredictor, TrainConfig, label_error,
                         make_fuzzy_rows, make_smlp_c, make_smlp_p, noised_router, quantize,
                         required_scale, train_predictor)
from .spatial import SENTINEL_RANK, compute_mbr, curve_order, grid_partition, morton_width, rank_map

log = logging.getLogger(__name__)

INDEX_MAGIC = b"SLQ1"
INDEX_VERSION = 1
DELTA_MAGIC = b"SLQD"


class IndexFormatError(ValueError):
    pass


@dataclass
class IndexConfig:
    b: int = 8
    m: int = 300
    k: int = 64
    dummy_ratio: float = 0.1
    hidden: int = 32
    scale: int = DEFAULT_SCALE
    fuzzy: bool = True
    noise: float = 1 / 16
    epochs: int = 2000
    lr: float = 0.01
    leaf_err_target: int = 1
    route_err_target: int = 0
    tau: float = 0.2
    seed: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: dict) -> "IndexConfig":
        return cls(**obj)


# -- DSP view -----------------------------------------------------------------

@dataclass
class IndexMeta:
    n: int
    d: int
    b: int
    m: int
    k: int
    dummy_ratio: float
    key_id: bytes
    leaf_scale: int
    hidden: int
    fuzzy: bool


@dataclass
class EncBucket:
    slots: list[list[Ciphertext]]
    mbr: list[Ciphertext]
    bitmap: list[int]


@dataclass
class Node:
    """Internal routing node as stored at the DSP."""

    model: SecurePredictor
    routes: list[int]
    children: list["Node"]
    leaves: list[SecurePredictor]
    fuzzy: list[list[Ciphertext]]
    leaf_pos: list[int]


@dataclass
class SLQIndex:
    meta: IndexMeta
    root: Node | SecurePredictor
    buckets: list[EncBucket]

    @property
    def bucket_count(self) -> int:
        return len(self.buckets)

    def leaves(self) -> list[SecurePredictor]:
        return list(_iter_dsp_leaves(self.root))

    def set_leaf(self, addr: int, pred: SecurePredictor) -> None:
        if isinstance(self.root, SecurePredictor):
            if addr != 0:
                raise IndexError(f"no leaf at address {addr}")
            self.root = pred
            return
        count = 0
        for node in _iter_nodes(self.root):
            if addr < count + len(node.leaves):
                node.leaves[addr - count] = pred
                return
            count += len(node.leaves)
        raise IndexError(f"no leaf at address {addr}")


def _iter_nodes(node: Node) -> Iterator[Node]:
    yield node
    for child in node.children:
        yield from _iter_nodes(child)


def _iter_dsp_leaves(root) -> Iterator[SecurePredictor]:
    if isinstance(root, SecurePredictor):
        yield root
        return
    for node in _iter_nodes(root):
        yield from node.leaves


# -- binary codec -------------------------------------------------------------

class _Out:
    def __init__(self, pk_width: int) -> None:
        self.buf = bytearray()
        self.width = pk_width

    def u8(self, v: int) -> None:
        self.buf += struct.pack(">B", v)

    def u32(self, v: int) -> None:
        self.buf += struct.pack(">I", v)

    def i32(self, v: int) -> None:
        self.buf += struct.pack(">i", v)

    def sint(self, v: int) -> None:
        body = v.to_bytes((v.bit_length() + 8) // 8, "big", signed=True)
        self.buf += struct.pack(">H", len(body)) + body

    def raw(self, b: bytes) -> None:
        self.buf += b

    def ct(self, c: Ciphertext) -> None:
        self.buf += serialize_ct(c, self.width)

    def cts(self, cs) -> None:
        for c in cs:
            self.ct(c)


class _In:
    def __init__(self, data: bytes, pk: PublicKey | None) -> None:
        self.data = data
        self.off = 0
        self.pk = pk

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise IndexFormatError("truncated index data")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def i32(self) -> int:
        return struct.unpack(">i", self.take(4))[0]

    def sint(self) -> int:
        (n,) = struct.unpack(">H", self.take(2))
        return int.from_bytes(self.take(n), "big", signed=True)

    def ct(self) -> Ciphertext:
        try:
            c, self.off = deserialize_ct(self.data, self.pk, self.off)
        except ValueError as exc:
            raise IndexFormatError(str(exc)) from exc
        return c

    def cts(self, n: int) -> list[Ciphertext]:
        return [self.ct() for _ in range(n)]


_LEVELS = {"head": 0, "intermediate": 1, "leaf": 2}
_LEVEL_NAMES = {v: k for k, v in _LEVELS.items()}


def _put_predictor(out: _Out, p: SecurePredictor) -> None:
    out.u8(_LEVELS[p.level])
    out.u8(0 if p.mode == "smlp_p" else 1)
    out.u32(p.hidden)
    out.u32(p.dim)
    out.sint(p.scale)
    if p.mode == "smlp_p":
        out.u32(p.eta)
        for row in p.W1:
            for w in row:
                out.sint(w)
        out.cts(p.b1)
        for w in p.W2:
            out.sint(w)
        out.sint(p.b2)
    else:
        out.cts(p.flat_params())


def _get_predictor(inp: _In) -> SecurePredictor:
    level = _LEVEL_NAMES.get(inp.u8())
    mode = inp.u8()
    hidden = inp.u32()
    dim = inp.u32()
    scale = inp.sint()
    if level is None or mode not in (0, 1):
        raise IndexFormatError("bad predictor tag")
    if mode == 0:
        eta = inp.u32()
        W1 = [[inp.sint() for _ in range(dim)] for _ in range(hidden)]
        b1 = inp.cts(hidden)
        W2 = [inp.sint() for _ in range(hidden)]
        b2 = inp.sint()
        return SecurePredictor("smlp_p", level, scale, W1, b1, W2, b2, eta=eta)
    flat = inp.cts(hidden * dim + 2 * hidden + 4)
    return SecurePredictor.from_flat(flat, hidden, dim, scale, level)


def _put_node(out: _Out, node) -> None:
    if isinstance(node, SecurePredictor):
        out.u8(1)
        _put_predictor(out, node)
        return
    out.u8(0)
    _put_predictor(out, node.model)
    out.u32(len(node.routes))
    for r in node.routes:
        out.i32(r)
    for r in node.leaf_pos:
        out.i32(r)
    out.u32(len(node.leaves))
    out.u32(len(node.children))
    for row in node.fuzzy:
        out.u32(len(row))
        out.cts(row)
    for leaf in node.leaves:
        _put_predictor(out, leaf)
    for child in node.children:
        _put_node(out, child)


def _get_node(inp: _In, depth: int = 0):
    if depth > 64:
        raise IndexFormatError("predictor tree too deep")
    tag = inp.u8()
    if tag == 1:
        return _get_predictor(inp)
    if tag != 0:
        raise IndexFormatError("bad node tag")
    model = _get_predictor(inp)
    eta = inp.u32()
    routes = [inp.i32() for _ in range(eta)]
    leaf_pos = [inp.i32() for _ in range(eta)]
    n_leaves = inp.u32()
    n_children = inp.u32()
    fuzzy = [inp.cts(inp.u32()) for _ in range(eta)]
    leaves = [_get_predictor(inp) for _ in range(n_leaves)]
    children = [_get_node(inp, depth + 1) for _ in range(n_children)]
    return Node(model, routes, children, leaves, fuzzy, leaf_pos)


def _put_bucket(out: _Out, bk: EncBucket) -> None:
    for slot in bk.slots:
        out.cts(slot)
    out.cts(bk.mbr)
    out.raw(bytes(bk.bitmap))


def _get_bucket(inp: _In, b: int, d: int) -> EncBucket:
    slots = [inp.cts(d) for _ in range(b)]
    mbr = inp.cts(2 * d)
    bitmap = list(inp.take(b))
    if any(x > 1 for x in bitmap):
        raise IndexFormatError("bitmap entries must be 0 or 1")
    return EncBucket(slots, mbr, bitmap)


def _put_meta(out: _Out, meta: IndexMeta) -> None:
    out.raw(meta.key_id)
    for v in (meta.n, meta.d, meta.b, meta.m, meta.k, meta.hidden):
        out.u32(v)
    out.u32(int(round(meta.dummy_ratio * 1_000_000)))
    out.sint(meta.leaf_scale)
    out.u8(1 if meta.fuzzy else 0)


def _get_meta(inp: _In) -> IndexMeta:
    key_id = inp.take(16)
    n, d, b, m, k, hidden = (inp.u32() for _ in range(6))
    ratio = inp.u32() / 1_000_000
    scale = inp.sint()
    fuzzy = inp.u8() == 1
    return IndexMeta(n, d, b, m, k, ratio, key_id, scale, hidden, fuzzy)


def serialize_index(index: SLQIndex, pk: PublicKey) -> bytes:
    out = _Out(pk.ct_bytes)
    out.raw(INDEX_MAGIC)
    out.u8(INDEX_VERSION)
    _put_meta(out, index.meta)
    _put_node(out, index.root)
    out.u32(len(index.buckets))
    for bk in index.buckets:
        _put_bucket(out, bk)
    return bytes(out.buf)


def load_index(data: bytes, pk: PublicKey) -> SLQIndex:
    if data[:4] != INDEX_MAGIC:
        raise IndexFormatError("not an SLQ index (bad magic)")
    inp = _In(data, pk)
    inp.take(4)
    if inp.u8() != INDEX_VERSION:
        raise IndexFormatError("unsupported index version")
    meta = _get_meta(inp)
    if meta.key_id != pk.key_id:
        raise IndexFormatError("index was built under a different public key")
    root = _get_node(inp)
    buckets = [_get_bucket(inp, meta.b, meta.d) for _ in range(inp.u32())]
    if inp.off != len(data):
        raise IndexFormatError("trailing bytes after index")
    return SLQIndex(meta, root, buckets)


# -- data-owner mirror --------------------------------------------------------

@dataclass
class PlainLeaf:
    model: QuantMlp
    err: int
    lo: int
    hi: int
    addr: int = -1


@dataclass
class PlainNode:
    model: QuantMlp
    eta: int
    routes: list[int]
    children: list
    leaf_order: list[int]
    level: str
    noise: float = 0.0

    def route(self, x: Sequence[int]) -> int:
        return self.routes[self.model.label(x, 1, self.eta) - 1]


@dataclass
class DoBucket:
    slots: list[int | None]
    deleted: list[bool]
    decoy: bool = False

    def free_slot(self) -> int | None:
        for i, s in enumerate(self.slots):
            if s is None:
                return i
        return None

    @property
    def live(self) -> list[int]:
        return [s for s in self.slots if s is not None]


class RankTable:
    """Published per-dimension (coordinate, rank) boundaries for trapdoors."""

    def __init__(self, entries: list[list[tuple[float, int]]]) -> None:
        self.entries = entries

    @classmethod
    def from_points(cls, raw: np.ndarray, ranks: np.ndarray, alive: Sequence[bool] | None = None) -> "RankTable":
        d = raw.shape[1]
        rows = range(len(raw)) if alive is None else [i for i in range(len(raw)) if alive[i]]
        return cls([sorted((float(raw[i, j]), int(ranks[i, j])) for i in rows) for j in range(d)])

    @property
    def d(self) -> int:
        return len(self.entries)

    def max_rank(self, j: int) -> int:
        return self.entries[j][-1][1] if self.entries[j] else 0

    def rank_query(self, lo: Sequence[float], hi: Sequence[float]) -> tuple[list[int], list[int]] | None:
        """Rank-space rectangle equivalent to ``[lo, hi]``; None when empty."""
        rlo, rhi = [], []
        for j, (a, b) in enumerate(zip(lo, hi)):
            e = self.entries[j]
            i = bisect.bisect_left(e, (float(a), -1))
            k = bisect.bisect_right(e, (float(b), math.inf)) - 1
            if a > b or i >= len(e) or k < 0 or e[i][1] > e[k][1]:
                return None
            rlo.append(e[i][1])
            rhi.append(e[k][1])
        return rlo, rhi

    def insert(self, point: Sequence[float]) -> tuple[tuple[int, ...], bool]:
        """Rank of a new point: its successor's rank, or max + 1 past the end."""
        ranks, overflow = [], False
        for j, c in enumerate(point):
            e = self.entries[j]
            i = bisect.bisect_left(e, (float(c), -1))
            if i < len(e):
                r = e[i][1]
            else:
                r = self.max_rank(j) + 1
                overflow = True
            ranks.append(r)
        for j, c in enumerate(point):
            bisect.insort(self.entries[j], (float(c), ranks[j]))
        return tuple(ranks), overflow

    def remove(self, point: Sequence[float], ranks: Sequence[int]) -> None:
        for j, (c, r) in enumerate(zip(point, ranks)):
            self.entries[j].remove((float(c), int(r)))

    def to_json(self) -> list:
        return [[[c, r] for c, r in e] for e in self.entries]

    @classmethod
    def from_json(cls, obj: list) -> "RankTable":
        return cls([[(float(c), int(r)) for c, r in e] for e in obj])


@dataclass
class UpdateLog:
    inserts: int = 0
    deletes: int = 0
    tau: float = 0.2
    overflow: bool = False


def should_rebuild(log_: UpdateLog, n: int) -> bool:
    return log_.overflow or log_.inserts + log_.deletes > log_.tau * n


@dataclass
class Delta:
    """Ordered DSP-side edits: ``(op, position, payload)`` tuples."""

    ops: list[tuple] = field(default_factory=list)


@dataclass
class UpdateResult:
    status: str
    delta: Delta
    bucket: int | None = None
    new_bucket: bool = False
    removed_bucket: bool = False


class OwnerIndex:
    """Data-owner state: plaintext mirror plus the encrypted DSP view."""

    def __init__(self, cfg: IndexConfig, pk: PublicKey, enc: Encrypter, raw: np.ndarray,
                 ranks: np.ndarray, alive: list[bool], root, buckets: list[DoBucket],
                 leaf_scale: int, log_: UpdateLog | None = None) -> None:
        self.cfg = cfg
        self.pk = pk
        self.enc = enc
        self.raw = np.asarray(raw, dtype=float)
        self.ranks = np.asarray(ranks, dtype=np.int64)
        self.alive = alive
        self.root = root
        self.buckets = buckets
        self.leaf_scale = leaf_scale
        self.log = log_ or UpdateLog(tau=cfg.tau)
        self.table = RankTable.from_points(self.raw, self.ranks, alive)
        self.slice_leaves = list(self._iter_plain_leaves_slice_order(root))
        self._assign_addresses()
        self.dsp: SLQIndex | None = None

    # structure helpers -------------------------------------------------------

    @property
    def d(self) -> int:
        return self.raw.shape[1]

    @property
    def n_live(self) -> int:
        return sum(self.alive)

    def _iter_plain_leaves_slice_order(self, node) -> Iterator[PlainLeaf]:
        if isinstance(node, PlainLeaf):
            yield node
            return
        for child in node.children:
            yield from self._iter_plain_leaves_slice_order(child)

    def _iter_plain_nodes(self, node) -> Iterator[PlainNode]:
        if isinstance(node, PlainLeaf):
            return
        yield node
        for child in node.children:
            if isinstance(child, PlainNode):
                yield from self._iter_plain_nodes(child)

    def _assign_addresses(self) -> None:
        if isinstance(self.root, PlainLeaf):
            self.root.addr = 0
            return
        addr = 0
        for node in self._iter_plain_nodes(self.root):
            for child_idx in node.leaf_order:
                node.children[child_idx].addr = addr
                addr += 1

    def route(self, x: Sequence[int]) -> PlainLeaf:
        node = self.root
        while isinstance(node, PlainNode):
            node = node.children[node.route(x)]
        return node

    def leaf_of_bucket(self, bid: int) -> PlainLeaf:
        for leaf in self.slice_leaves:
            if leaf.lo <= bid <= leaf.hi:
                return leaf
        raise KeyError(f"bucket {bid} belongs to no leaf")

    def locate(self) -> dict[int, int]:
        """Point id -> 1-based bucket id for every live point."""
        out = {}
        for pos, bk in enumerate(self.buckets, start=1):
            for s in bk.live:
                out[s] = pos
        return out

    def point_ranks(self, pid: int) -> tuple[int, ...]:
        return tuple(int(v) for v in self.ranks[pid])

    # encryption --------------------------------------------------------------

    def encrypt_bucket(self, bk: DoBucket) -> EncBucket:
        d = self.d
        slots = []
        for s in bk.slots:
            vals = self.point_ranks(s) if s is not None else (SENTINEL_RANK,) * d
            slots.append([self.enc.encrypt(v) for v in vals])
        mbr = compute_mbr([self.point_ranks(s) for s in bk.live], d)
        return EncBucket(slots, [self.enc.encrypt(v) for v in mbr.flat()],
                         [1 if x else 0 for x in bk.deleted])

    def encrypt_leaf(self, leaf: PlainLeaf) -> SecurePredictor:
        return make_smlp_c(leaf.model, leaf.err, leaf.lo, leaf.hi, self.enc)

    def _encrypt_tree(self, node):
        if isinstance(node, PlainLeaf):
            return self.encrypt_leaf(node)
        model = make_smlp_p(node.model, node.eta, self.enc, node.level)
        internal = [i for i, c in enumerate(node.children) if isinstance(c, PlainNode)]
        internal_pos = {c: i for i, c in enumerate(internal)}
        stored_pos = {c: i for i, c in enumerate(node.leaf_order)}
        routes, targets, leaf_pos = [], [], []
        for c in node.routes:
            if c in internal_pos:
                routes.append(internal_pos[c])
                targets.append(None)
                leaf_pos.append(-1)
            else:
                routes.append(-1)
                targets.append(stored_pos[c])
                leaf_pos.append(-1 if self.cfg.fuzzy else stored_pos[c])
        leaves = [self.encrypt_leaf(node.children[c]) for c in node.leaf_order]
        fuzzy = (make_fuzzy_rows(targets, len(leaves), self.enc) if self.cfg.fuzzy
                 else [[] for _ in targets])
        children = [self._encrypt_tree(node.children[c]) for c in internal]
        return Node(model, routes, children, leaves, fuzzy, leaf_pos)

    def meta(self) -> IndexMeta:
        c = self.cfg
        return IndexMeta(self.n_live, self.d, c.b, c.m, c.k, c.dummy_ratio, self.pk.key_id,
                         self.leaf_scale, c.hidden, c.fuzzy)

    def encrypt_all(self) -> SLQIndex:
        self.dsp = SLQIndex(self.meta(), self._encrypt_tree(self.root),
                            [self.encrypt_bucket(bk) for bk in self.buckets])
        return self.dsp

    # audits ------------------------------------------------------------------

    def audit(self) -> list[tuple[int, int, int, int]]:
        """Error-bound check over live points: ``(id, predicted, actual, err)`` violations."""
        where = self.locate()
        bad = []
        for pid, bid in where.items():
            x = self.point_ranks(pid)
            leaf = self.route(x)
            pred = leaf.model.label(x, leaf.lo, leaf.hi)
            if not leaf.lo <= bid <= leaf.hi or abs(pred - bid) > leaf.err:
                bad.append((pid, pred, bid, leaf.err))
        return bad

    def check_structure(self) -> None:
        b, d = self.cfg.b, self.d
        expect = 1
        for leaf in self.slice_leaves:
            if leaf.lo != expect or leaf.hi < leaf.lo:
                raise AssertionError(f"leaf slice [{leaf.lo}, {leaf.hi}] breaks contiguity")
            expect = leaf.hi + 1
        if expect != len(self.buckets) + 1:
            raise AssertionError("leaf slices do not cover the bucket array")
        for bk in self.buckets:
            if len(bk.slots) != b:
                raise AssertionError("bucket with wrong slot count")
            mbr = compute_mbr([self.point_ranks(s) for s in bk.live], d)
            for s in bk.live:
                if not mbr.contains(self.point_ranks(s)):
                    raise AssertionError("point outside its bucket MBR")

    # updates -----------------------------------------------------------------

    def _refresh_err(self, leaf: PlainLeaf) -> None:
        where = self.locate()
        worst = leaf.err
        for pid, bid in where.items():
            if leaf.lo <= bid <= leaf.hi:
                x = self.point_ranks(pid)
                worst = max(worst, abs(leaf.model.label(x, leaf.lo, leaf.hi) - bid))
        leaf.err = worst

    def _shift_after(self, leaf: PlainLeaf, by: int) -> list[PlainLeaf]:
        idx = self.slice_leaves.index(leaf)
        moved = self.slice_leaves[idx + 1:]
        for other in moved:
            other.lo += by
            other.hi += by
            other.model = other.model.shifted(by)
        return moved

    def _leaf_ops(self, leaves: Sequence[PlainLeaf], delta: Delta) -> None:
        for leaf in leaves:
            pred = self._reencrypt_leaf(leaf)
            self.dsp.set_leaf(leaf.addr, pred)
            delta.ops.append(("leaf", leaf.addr, pred))

    def _reencrypt_leaf(self, leaf: PlainLeaf) -> SecurePredictor:
        """Fresh ciphertexts for the fields that can change, reuse the rest."""
        old = self.dsp.leaves()[leaf.addr]
        s2 = leaf.model.scale ** 2
        return SecurePredictor("smlp_c", "leaf", old.scale, old.W1, old.b1, old.W2,
                               self.enc.encrypt(leaf.model.b2), err=self.enc.encrypt(leaf.err),
                               lo=self.enc.encrypt(leaf.lo * s2), hi=self.enc.encrypt(leaf.hi * s2))

    def _meta_op(self, delta: Delta) -> None:
        self.dsp.meta = self.meta()
        delta.ops.append(("meta", 0, self.dsp.meta))

    def insert(self, point: Sequence[float]) -> UpdateResult:
        if self.dsp is None:
            raise RuntimeError("encrypt the index before applying updates")
        point = [float(c) for c in point]
        if len(point) != self.d:
            raise ValueError(f"expected {self.d} coordinates")
        ranks, overflow = self.table.insert(point)
        pid = len(self.raw)
        self.raw = np.vstack([self.raw, np.asarray(point)[None, :]])
        self.ranks = np.vstack([self.ranks, np.asarray(ranks, dtype=np.int64)[None, :]])
        self.alive.append(True)
        if overflow:
            self.log.overflow = True
            log.warning("inserted point lies past the rank domain; rebuild recommended")
        leaf = self.route(ranks)
        target = leaf.model.label(ranks, leaf.lo, leaf.hi)
        bk = self.buckets[target - 1]
        slot = bk.free_slot()
        delta = Delta()
        result = UpdateResult("inserted", delta, bucket=target)
        if slot is not None:
            bk.slots[slot] = pid
            bk.deleted[slot] = False
            bk.decoy = False
            enc = self.encrypt_bucket(bk)
            self.dsp.buckets[target - 1] = enc
            delta.ops.append(("bucket", target, enc))
            old_err = leaf.err
            self._refresh_err(leaf)
            if leaf.err != old_err:
                self._leaf_ops([leaf], delta)
        else:
            new = DoBucket([pid] + [None] * (self.cfg.b - 1), [False] * self.cfg.b)
            self.buckets.insert(target, new)
            leaf.hi += 1
            moved = self._shift_after(leaf, 1)
            enc = self.encrypt_bucket(new)
            self.dsp.buckets.insert(target, enc)
            delta.ops.append(("insert_bucket", target + 1, enc))
            self._refresh_err(leaf)
            self._leaf_ops([leaf] + moved, delta)
            result.bucket = target + 1
            result.new_bucket = True
        self.log.inserts += 1
        self._meta_op(delta)
        return result

    def find(self, point: Sequence[float]) -> int | None:
        target = np.asarray(point, dtype=float)
        for pid in range(len(self.raw)):
            if self.alive[pid] and np.array_equal(self.raw[pid], target):
                return pid
        return None

    def delete(self, point: Sequence[float]) -> UpdateResult:
        if self.dsp is None:
            raise RuntimeError("encrypt the index before applying updates")
        pid = self.find(point)
        delta = Delta()
        if pid is None:
            return UpdateResult("not_found", delta)
        bid = self.locate()[pid]
        bk = self.buckets[bid - 1]
        slot = bk.slots.index(pid)
        bk.slots[slot] = None
        bk.deleted[slot] = True
        self.alive[pid] = False
        self.table.remove(self.raw[pid], self.point_ranks(pid))
        leaf = self.leaf_of_bucket(bid)
        result = UpdateResult("deleted", delta, bucket=bid)
        if not bk.live and leaf.hi > leaf.lo:
            del self.buckets[bid - 1]
            del self.dsp.buckets[bid - 1]
            delta.ops.append(("remove_bucket", bid, None))
            leaf.hi -= 1
            moved = self._shift_after(leaf, -1)
            self._refresh_err(leaf)
            self._leaf_ops([leaf] + moved, delta)
            result.removed_bucket = True
        else:
            enc = self.encrypt_bucket(bk)
            self.dsp.buckets[bid - 1] = enc
            delta.ops.append(("bucket", bid, enc))
        self.log.deletes += 1
        self._meta_op(delta)
        return result

    def should_rebuild(self) -> bool:
        return should_rebuild(self.log, len(self.raw))

    # persistence -------------------------------------------------------------

    def _tree_json(self, node) -> dict:
        if isinstance(node, PlainLeaf):
            return {"leaf": True, "model": node.model.to_json(), "err": node.err,
                    "lo": node.lo, "hi": node.hi}
        return {"leaf": False, "model": node.model.to_json(), "eta": node.eta,
                "routes": node.routes, "leaf_order": node.leaf_order, "level": node.level,
                "noise": node.noise, "children": [self._tree_json(c) for c in node.children]}

    @classmethod
    def _tree_from_json(cls, obj: dict):
        if obj["leaf"]:
            return PlainLeaf(QuantMlp.from_json(obj["model"]), obj["err"], obj["lo"], obj["hi"])
        return PlainNode(QuantMlp.from_json(obj["model"]), obj["eta"], obj["routes"],
                         [cls._tree_from_json(c) for c in obj["children"]], obj["leaf_order"],
                         obj["level"], obj.get("noise", 0.0))

    def to_json(self) -> dict:
        return {
            "config": self.cfg.to_json(),
            "raw": self.raw.tolist(),
            "ranks": self.ranks.tolist(),
            "alive": self.alive,
            "tree": self._tree_json(self.root),
            "buckets": [{"slots": bk.slots, "deleted": bk.deleted, "decoy": bk.decoy}
                        for bk in self.buckets],
            "leaf_scale": self.leaf_scale,
            "log": {"inserts": self.log.inserts, "deletes": self.log.deletes,
                    "tau": self.log.tau, "overflow": self.log.overflow},
        }

    def save(self, path: str | Path) -> None:
        """Write the DSP view to ``path`` and the owner mirror to ``path.owner.json``."""
        path = Path(path)
        path.write_bytes(serialize_index(self.dsp, self.pk))
        owner_path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path, pk: PublicKey, enc: Encrypter | None = None) -> "OwnerIndex":
        path = Path(path)
        obj = json.loads(owner_path(path).read_text())
        cfg = IndexConfig.from_json(obj["config"])
        lg = obj["log"]
        owner = cls(cfg, pk, enc or Encrypter(pk), np.asarray(obj["raw"], dtype=float),
                    np.asarray(obj["ranks"], dtype=np.int64), list(obj["alive"]),
                    cls._tree_from_json(obj["tree"]),
                    [DoBucket(list(b["slots"]), list(b["deleted"]), b["decoy"]) for b in obj["buckets"]],
                    obj["leaf_scale"], UpdateLog(lg["inserts"], lg["deletes"], lg["tau"], lg["overflow"]))
        owner.dsp = load_index(path.read_bytes(), pk)
        return owner


def owner_path(path: Path) -> Path:
    return path.with_name(path.name + ".owner.json")


def load_rank_table(path: str | Path) -> RankTable:
    """Client-side boundaries, read from the owner mirror next to an index file."""
    obj = json.loads(owner_path(Path(path)).read_text())
    raw = np.asarray(obj["raw"], dtype=float)
    return RankTable.from_points(raw, np.asarray(obj["ranks"], dtype=np.int64), obj["alive"])


# -- deltas -------------------------------------------------------------------

def apply_delta(index: SLQIndex, delta: Delta) -> None:
    for op, pos, payload in delta.ops:
        if op == "bucket":
            index.buckets[pos - 1] = payload
        elif op == "insert_bucket":
            index.buckets.insert(pos - 1, payload)
        elif op == "remove_bucket":
            del index.buckets[pos - 1]
        elif op == "leaf":
            index.set_leaf(pos, payload)
        elif op == "meta":
            index.meta = payload
        else:
            raise ValueError(f"unknown delta op {op!r}")


_OPS = {"bucket": 1, "insert_bucket": 2, "remove_bucket": 3, "leaf": 4, "meta": 5}
_OP_NAMES = {v: k for k, v in _OPS.items()}


def serialize_delta(delta: Delta, pk: PublicKey) -> bytes:
    out = _Out(pk.ct_bytes)
    out.raw(DELTA_MAGIC)
    out.u32(len(delta.ops))
    for op, pos, payload in delta.ops:
        out.u8(_OPS[op])
        out.u32(pos)
        if op in ("bucket", "insert_bucket"):
            out.u32(len(payload.slots))
            out.u32(len(payload.mbr) // 2)
            _put_bucket(out, payload)
        elif op == "leaf":
            _put_predictor(out, payload)
        elif op == "meta":
            _put_meta(out, payload)
    return bytes(out.buf)


def load_delta(data: bytes, pk: PublicKey) -> Delta:
    if data[:4] != DELTA_MAGIC:
        raise IndexFormatError("not an SLQ delta (bad magic)")
    inp = _In(data, pk)
    inp.take(4)
    ops = []
    for _ in range(inp.u32()):
        op = _OP_NAMES.get(inp.u8())
        pos = inp.u32()
        if op in ("bucket", "insert_bucket"):
            b, d = inp.u32(), inp.u32()
            ops.append((op, pos, _get_bucket(inp, b, d)))
        elif op == "leaf":
            ops.append((op, pos, _get_predictor(inp)))
        elif op == "meta":
            ops.append((op, pos, _get_meta(inp)))
        elif op == "remove_bucket":
            ops.append((op, pos, None))
        else:
            raise IndexFormatError("bad delta op")
    return Delta(ops)


# -- build --------------------------------------------------------------------

@dataclass
class _LeafPlan:
    idx: np.ndarray


def _group_labels(cells: np.ndarray, k: int) -> tuple[np.ndarray, int]:
    """Dense 1-based labels over occupied cells, merging neighbours past ``k``."""
    uniq = np.unique(cells)
    pos = np.searchsorted(uniq, cells)
    if len(uniq) > k:
        pos = pos * k // len(uniq)
        return pos + 1, k
    return pos + 1, len(uniq)


class _Builder:
    def __init__(self, cfg: IndexConfig, ranks: np.ndarray) -> None:
        self.cfg = cfg
        self.ranks = ranks
        self.rng = np.random.default_rng(cfg.seed)
        self.model_seed = cfg.seed * 1000
        self.degenerate = 0

    def _tcfg(self, target: int) -> TrainConfig:
        self.model_seed += 1
        c = self.cfg
        return TrainConfig(hidden=c.hidden, lr=c.lr, epochs=c.epochs, err_target=target,
                           seed=self.model_seed)

    def partition(self, idx: np.ndarray, depth: int = 0):
        cfg = self.cfg
        if len(idx) <= cfg.m or depth > 32:
            return _LeafPlan(idx)
        X = self.ranks[idx]
        _, cells = grid_partition(X, cfg.m, cfg.b)
        labels, eta = _group_labels(cells, cfg.k)
        if eta <= 1:
            self.degenerate += 1
            log.warning("partition of %d points cannot be split by the grid; kept as one leaf", len(idx))
            return _LeafPlan(idx)
        fm, _ = train_predictor(X, labels, self._tcfg(cfg.route_err_target), lo=1, hi=eta)
        q = quantize(fm, required_scale(fm, X, cfg.scale))
        q, noise = noised_router(q, X, eta, float(X.max()), self.rng, cfg.noise)
        pred = np.asarray([q.label(x, 1, eta) for x in X.tolist()])
        used = sorted(set(pred.tolist()))
        if len(used) <= 1:
            self.degenerate += 1
            log.warning("router sends all %d points to one child; kept as one leaf", len(idx))
            return _LeafPlan(idx)
        child_of = {lab: i for i, lab in enumerate(used)}
        routes = []
        for j in range(1, eta + 1):
            nxt = next((lab for lab in used if lab >= j), used[-1])
            routes.append(child_of[nxt])
        children = [self.partition(idx[pred == lab], depth + 1) for lab in used]
        level = "head" if depth == 0 else "intermediate"
        return PlainNode(q, eta, routes, children, [], level, noise)


def _plan_leaves(node) -> Iterator[_LeafPlan]:
    if isinstance(node, _LeafPlan):
        yield node
        return
    for c in node.children:
        yield from _plan_leaves(c)


def inject_dummies(real_counts: Sequence[int], ratio: float, rng: np.random.Generator) -> list[tuple[int, bool]]:
    """Bucket layout ``[(leaf_index, is_decoy)]`` with ``ceil(ratio * total)`` decoys.

    Decoys take uniformly random positions in the final array; each joins
    the slice of the leaf owning the preceding real bucket (the first leaf for
    leading decoys), so leaf slices stay contiguous.
    """
    if ratio < 0:
        raise ValueError("dummy ratio must be non-negative")
    total = int(sum(real_counts))
    n_decoy = int(math.ceil(ratio * total - 1e-9)) if ratio > 0 else 0
    flags = np.zeros(total + n_decoy, dtype=bool)
    if n_decoy:
        flags[rng.choice(total + n_decoy, size=n_decoy, replace=False)] = True
    layout = []
    leaf, left = 0, real_counts[0] if real_counts else 0
    started = False
    for is_decoy in flags:
        if is_decoy:
            layout.append((leaf, True))
            continue
        if started and left == 0:
            leaf += 1
            left = real_counts[leaf]
        started = True
        layout.append((leaf, False))
        left -= 1
    return layout


def build_index(raw, pk: PublicKey, cfg: IndexConfig | None = None,
                enc: Encrypter | None = None, encrypt: bool = True) -> OwnerIndex:
    """Rank-map, partition, train and encrypt; returns the owner-side index."""
    cfg = cfg or IndexConfig()
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or len(raw) < 1:
        raise ValueError("dataset must be a non-empty (n, d) array")
    if cfg.b < 1 or cfg.m < 1:
        raise ValueError("b and m must be positive")
    n, d = raw.shape
    ranks = rank_map(raw)
    order, _ = curve_order(ranks, morton_width(n))
    builder = _Builder(cfg, ranks)
    plan = builder.partition(order)

    plans = list(_plan_leaves(plan))
    counts = [math.ceil(len(p.idx) / cfg.b) for p in plans]
    layout = inject_dummies(counts, cfg.dummy_ratio, builder.rng)

    buckets: list[DoBucket] = []
    slices: list[list[int]] = [[] for _ in plans]
    cursor = [0] * len(plans)
    labels: dict[int, int] = {}
    for pos, (li, is_decoy) in enumerate(layout, start=1):
        slices[li].append(pos)
        if is_decoy:
            buckets.append(DoBucket([None] * cfg.b, [False] * cfg.b, decoy=True))
            continue
        chunk = plans[li].idx[cursor[li]:cursor[li] + cfg.b].tolist()
        cursor[li] += cfg.b
        for pid in chunk:
            labels[int(pid)] = pos
        buckets.append(DoBucket(chunk + [None] * (cfg.b - len(chunk)), [False] * cfg.b))

    floats = []
    for li, p in enumerate(plans):
        X = ranks[p.idx]
        y = np.asarray([labels[int(i)] for i in p.idx])
        lo, hi = slices[li][0], slices[li][-1]
        fm, _ = train_predictor(X, y, builder._tcfg(cfg.leaf_err_target), lo=lo, hi=hi)
        floats.append((fm, X, y, lo, hi))
    leaf_scale = max(required_scale(fm, X, cfg.scale) for fm, X, *_ in floats)
    leaves = []
    for fm, X, y, lo, hi in floats:
        q = quantize(fm, leaf_scale)
        leaves.append(PlainLeaf(q, label_error(q, X, y, lo, hi), lo, hi))

    leaf_iter = iter(leaves)

    def materialize(node):
        if isinstance(node, _LeafPlan):
            return next(leaf_iter)
        kids = [materialize(c) for c in node.children]
        node.children = kids
        leaf_idx = [i for i, c in enumerate(kids) if isinstance(c, PlainLeaf)]
        perm = builder.rng.permutation(len(leaf_idx)).tolist()
        node.leaf_order = [leaf_idx[i] for i in perm]
        return node

    root = materialize(plan)
    owner = OwnerIndex(cfg, pk, enc or Encrypter(pk), raw, ranks, [True] * n, root, buckets, leaf_scale)
    owner.degenerate_partitions = builder.degenerate
    if encrypt:
        owner.encrypt_all()
    return owner
