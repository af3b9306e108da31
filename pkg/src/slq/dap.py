"""The DAP: holds the key pair and answers decrypt-compare-permute requests.

Each handler decodes one request payload, works on plaintexts that the DSP has
blinded or permuted, and answers with fresh encryptions or blinded integers.
The service also hosts the client mailbox used by the Return step.
"""
from __future__ import annotations

import logging
import secrets
from dataclasses import dataclass, field

from .paillier import Ciphertext, Encrypter, KeyPair, decrypt
from .primitives import Permutation, Prf, unpack_chunks
from .transport import REPLY, MsgType, ProtocolError, Transcript
from .wire import Reader, Writer

log = logging.getLogger(__name__)

MAX_BATCH = 1 << 22


def rescale(v: int, scale: int) -> int:
    """Round ``v / scale`` to the nearest integer, halves rounding up."""
    if scale <= 1:
        return v
    return (v + scale // 2) // scale


@dataclass
class Mailbox:
    """Masked result rows waiting for the client, keyed by a DSP token."""

    rows: dict[bytes, tuple[int, list[list[int]]]] = field(default_factory=dict)

    def put(self, token: bytes, d: int, values: list[list[int]]) -> None:
        self.rows[token] = (d, values)

    def take(self, token: bytes) -> tuple[int, list[list[int]]]:
        try:
            return self.rows.pop(token)
        except KeyError:
            raise ProtocolError(f"no results stored under token {token.hex()}") from None


class DapService:
    """Request handler for one DAP session."""

    def __init__(self, keys: KeyPair, seed=None, record_view: bool = False,
                 mailbox: Mailbox | None = None) -> None:
        self.keys = keys
        self.pk = keys.pk
        self.key_id = keys.pk.key_id
        self.prf = Prf(seed if seed is not None else secrets.token_bytes(32))
        self.enc = Encrypter(self.pk, rng=self.prf.child("encrypt"), sk=keys.sk)
        self.transcript = Transcript()
        self.record_view = record_view
        self.view: list[tuple[str, int]] = []
        self.mailbox = mailbox if mailbox is not None else Mailbox()
        self._handlers = {
            MsgType.SIC: self._sic,
            MsgType.SM: self._sm,
            MsgType.RELU: self._relu,
            MsgType.RAND: self._rand,
            MsgType.SBP_IDS: self._sbp_ids,
            MsgType.SBP_MATCH: self._sbp_match,
            MsgType.SPE_BOUNDS: self._spe_bounds,
            MsgType.SPE_FILTER: self._spe_filter,
            MsgType.SLQ_MARK: self._slq_mark,
            MsgType.RETURN: self._return,
            MsgType.FETCH: self._fetch,
            MsgType.ECHO: self._echo,
        }

    # -- plumbing -------------------------------------------------------------

    def handle(self, msg_type: int, payload: bytes) -> tuple[int, bytes]:
        try:
            fn = self._handlers[MsgType(msg_type)]
        except (ValueError, KeyError):
            raise ProtocolError(f"DAP does not serve message type {msg_type}") from None
        rd = Reader(self.pk, payload)
        w = fn(rd)
        rd.done()
        return msg_type | REPLY, w.payload()

    def _dec(self, c: Ciphertext, tag: str) -> int:
        v = decrypt(self.keys, c)
        if self.record_view:
            self.view.append((tag, v))
        return v

    def _count(self, rd: Reader) -> int:
        n = rd.u32()
        if n > MAX_BATCH:
            raise ProtocolError(f"batch of {n} exceeds limit")
        return n

    def _onehot(self, size: int, hot: int) -> list[Ciphertext]:
        return [self.enc.encrypt(1 if i == hot else 0) for i in range(size)]

    # -- primitives -----------------------------------------------------------

    def _sic(self, rd: Reader) -> Writer:
        n = self._count(rd)
        w = Writer(self.pk)
        for c in rd.cts(n):
            w.ct(self.enc.encrypt(1 if self._dec(c, "sic") > 0 else 0))
        return w

    def _sm(self, rd: Reader) -> Writer:
        n = self._count(rd)
        cts = rd.cts(2 * n)
        w = Writer(self.pk)
        for i in range(n):
            x = self._dec(cts[2 * i], "sm")
            y = self._dec(cts[2 * i + 1], "sm")
            w.ct(self.enc.encrypt(x * y))
        return w

    def _relu(self, rd: Reader) -> Writer:
        n = self._count(rd)
        return Writer(self.pk).sints(max(0, self._dec(c, "relu")) for c in rd.cts(n))

    def _rand(self, rd: Reader) -> Writer:
        n = self._count(rd)
        sizes = [rd.u32() for _ in range(n)]
        w = Writer(self.pk)
        for m in sizes:
            if m < 1:
                raise ProtocolError("empty sampling range")
            w.ct(self.enc.encrypt(self.prf.randbelow(m)))
        return w

    # -- secure bucket prediction ----------------------------------------------

    def _sbp_ids(self, rd: Reader) -> Writer:
        scale = rd.sint()
        n = self._count(rd)
        ids = [rescale(self._dec(c, "sbp_ids"), scale) for c in rd.cts(n)]
        pi = Permutation.random(n, self.prf)
        return Writer(self.pk).sints(pi.apply(ids))

    def _sbp_match(self, rd: Reader) -> Writer:
        d = rd.u32()
        m = self._count(rd)
        query = [self._dec(c, "sbp_match") for c in rd.cts(d)]
        slots = rd.cts(m * d)
        found = 0
        for i in range(m):
            point = [self._dec(c, "sbp_match") for c in slots[i * d:(i + 1) * d]]
            if point == query:
                found = 1
        return Writer(self.pk).u8(found)

    # -- secure point extraction -----------------------------------------------

    def _spe_bounds(self, rd: Reader) -> Writer:
        scale = rd.sint()
        lo, hi = rd.cts(2)
        return Writer(self.pk).sint(rescale(self._dec(lo, "spe_bounds"), scale)).sint(
            rescale(self._dec(hi, "spe_bounds"), scale))

    def _spe_filter(self, rd: Reader) -> Writer:
        d = rd.u32()
        width_buckets = self._count(rd)
        b = rd.u32()
        field_bits = rd.u32()
        n_theta = rd.u32()
        n_delta = rd.u32()
        theta_cts = rd.cts(n_theta)
        delta_cts = rd.cts(n_delta)
        slots = rd.cts(width_buckets * b * d)
        q = unpack_chunks([self._dec(c, "spe_theta") for c in theta_cts], 2 * d, field_bits, self.pk)
        mbrs = unpack_chunks([self._dec(c, "spe_delta") for c in delta_cts],
                             2 * d * width_buckets, field_bits, self.pk)
        hits = []
        for j in range(width_buckets):
            box = mbrs[2 * d * j:2 * d * (j + 1)]
            if all(max(box[k], q[k]) <= min(box[d + k], q[d + k]) for k in range(d)):
                hits.append(j)
        w = Writer(self.pk).u32(len(hits))
        for j in hits:
            w.cts(self._onehot(width_buckets, j))
        per = b * d
        for j in hits:
            w.cts(self.enc.rerandomize(c) for c in slots[j * per:(j + 1) * per])
        return w

    # -- range query -----------------------------------------------------------

    def _slq_mark(self, rd: Reader) -> Writer:
        total = self._count(rd)
        d = rd.u32()
        sigma = rd.u32()
        n_chunks = rd.u32()
        chunks = rd.cts(n_chunks)
        slots = rd.cts(total * d)
        nus = [self._dec(c, "slq_nu") for c in chunks]
        bits = unpack_chunks(nus, total, sigma, self.pk)
        marked = [i for i, bit in enumerate(bits) if bit == 1]
        w = Writer(self.pk).u32(len(marked))
        for i in marked:
            w.cts(self._onehot(total, i))
        for i in marked:
            w.cts(self.enc.rerandomize(c) for c in slots[i * d:(i + 1) * d])
        return w

    # -- Return ---------------------------------------------------------------

    def _return(self, rd: Reader) -> Writer:
        token = rd.raw(16)
        count = self._count(rd)
        d = rd.u32()
        cts = rd.cts(count * d)
        values = [[self._dec(c, "return") for c in cts[i * d:(i + 1) * d]] for i in range(count)]
        self.mailbox.put(token, d, values)
        return Writer(self.pk).u32(count)

    def _fetch(self, rd: Reader) -> Writer:
        token = rd.raw(16)
        d, values = self.mailbox.take(token)
        w = Writer(self.pk).u32(len(values)).u32(d)
        for row in values:
            w.sints(row)
        return w

    def _echo(self, rd: Reader) -> Writer:
        return Writer(self.pk).raw(rd.raw(len(rd.data) - rd.off))

