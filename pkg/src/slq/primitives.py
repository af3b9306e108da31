"""Two-party building blocks run by the DSP against the DAP.

Every function here executes on the DSP side: it blinds its ciphertexts,
sends one batched request over ``dsp.session`` and strips the blinding from
the reply.  The matching DAP duties live in :mod:`slq.dap`.
"""
from __future__ import annotations

import hashlib
import hmac
import secrets
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .paillier import Ciphertext, Encrypter, PublicKey, add_plain, hom_add, scalar_mul, trivial
from .transport import MsgType, Session

SIC_BLIND_BITS = 40
SM_MASK_BITS = 96
PERTURB_BITS = 40


# -- pseudo-random function ---------------------------------------------------

def _as_seed(seed: bytes | int | str | None) -> bytes:
    if seed is None:
        return secrets.token_bytes(32)
    if isinstance(seed, int):
        return hashlib.sha256(b"slq-seed" + seed.to_bytes(16, "big", signed=True)).digest()
    if isinstance(seed, str):
        return hashlib.sha256(seed.encode()).digest()
    return bytes(seed)


def _expand(key: bytes, counter: int, nbytes: int) -> bytes:
    out = bytearray()
    block = 0
    while len(out) < nbytes:
        out += hmac.new(key, struct.pack(">QI", counter, block), hashlib.sha256).digest()
        block += 1
    return bytes(out[:nbytes])


def prf_scalar(seed: bytes | int | str, counter: int, bound: int) -> int:
    """Deterministic value in ``[1, bound]`` keyed by ``seed`` at ``counter``."""
    if bound <= 0:
        raise ValueError("bound must be positive")
    nbytes = (bound.bit_length() + 64 + 7) // 8
    return 1 + int.from_bytes(_expand(_as_seed(seed), counter, nbytes), "big") % bound


class Prf:
    """Counter-mode HMAC-SHA256 stream; also usable as an ``rng``."""

    def __init__(self, seed: bytes | int | str | None = None) -> None:
        self.key = _as_seed(seed)
        self.counter = 0

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        nbytes = (n.bit_length() + 64 + 7) // 8
        v = int.from_bytes(_expand(self.key, self.counter, nbytes), "big") % n
        self.counter += 1
        return v

    def scalar(self, bound: int) -> int:
        """Uniform in ``[1, bound]``."""
        return 1 + self.randbelow(bound)

    def bit(self) -> int:
        return self.randbelow(2)

    def child(self, label: str) -> "Prf":
        return Prf(hmac.new(self.key, label.encode(), hashlib.sha256).digest())


# -- permutations and packing -------------------------------------------------

@dataclass(frozen=True)
class Permutation:
    """Bijection on positions; ``apply`` puts ``items[mapping[i]]`` at slot ``i``."""

    mapping: tuple[int, ...]
    inverse: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        inv = [0] * len(self.mapping)
        for i, m in enumerate(self.mapping):
            inv[m] = i
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError("mapping is not a bijection")
        object.__setattr__(self, "inverse", tuple(inv))

    @classmethod
    def from_one_based(cls, mapping: Sequence[int]) -> "Permutation":
        return cls(tuple(m - 1 for m in mapping))

    @classmethod
    def identity(cls, size: int) -> "Permutation":
        return cls(tuple(range(size)))

    @classmethod
    def random(cls, size: int, rng) -> "Permutation":
        perm = list(range(size))
        for i in range(size - 1, 0, -1):
            j = rng.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return cls(tuple(perm))

    def __len__(self) -> int:
        return len(self.mapping)

    def apply(self, items: Sequence) -> list:
        if len(items) != len(self.mapping):
            raise ValueError(f"expected {len(self.mapping)} items, got {len(items)}")
        return [items[m] for m in self.mapping]

    def invert(self, items: Sequence) -> list:
        if len(items) != len(self.mapping):
            raise ValueError(f"expected {len(self.mapping)} items, got {len(items)}")
        return [items[m] for m in self.inverse]


def permute(pi: Permutation, items: Sequence) -> list:
    return pi.apply(items)


def invert_permute(pi: Permutation, items: Sequence) -> list:
    return pi.invert(items)


@dataclass(frozen=True)
class PackedVector:
    value: int
    sigma: int
    lam: int


def pack(slots: Sequence[int], sigma: int, lam: int | None = None) -> int:
    """Pack slot values, slot 1 in the most significant field."""
    lam = len(slots) if lam is None else lam
    if len(slots) != lam:
        raise ValueError("slot count does not match lambda")
    nu = 0
    for x in slots:
        if not 0 <= x < (1 << sigma):
            raise ValueError(f"slot value {x} does not fit in {sigma} bits")
        nu = (nu << sigma) | x
    return nu


def unpack(nu: int, sigma: int, lam: int) -> list[int]:
    if nu < 0 or nu >> (sigma * lam):
        raise ValueError("packed value wider than sigma * lambda bits")
    mask = (1 << sigma) - 1
    return [(nu >> (sigma * (lam - 1 - i))) & mask for i in range(lam)]


def chunk_sizes(total: int, per_chunk: int) -> list[int]:
    if per_chunk < 1:
        raise ValueError("slot width leaves no room in the plaintext")
    full, rest = divmod(total, per_chunk)
    return [per_chunk] * full + ([rest] if rest else [])


def pack_ciphertexts(cts: Sequence[Ciphertext], sigma: int, pk: PublicKey) -> list[Ciphertext]:
    """Homomorphic packing by Horner's rule, chunked to the plaintext size."""
    per = pk.plaintext_bits // sigma
    out = []
    pos = 0
    for size in chunk_sizes(len(cts), per):
        acc = cts[pos]
        for c in cts[pos + 1:pos + size]:
            acc = hom_add(scalar_mul(acc, 1 << sigma), c)
        out.append(acc)
        pos += size
    return out


def unpack_chunks(values: Sequence[int], total: int, sigma: int, pk: PublicKey) -> list[int]:
    per = pk.plaintext_bits // sigma
    sizes = chunk_sizes(total, per)
    if len(sizes) != len(values):
        raise ValueError("chunk count mismatch")
    out: list[int] = []
    for v, size in zip(values, sizes):
        out.extend(unpack(v, sigma, size))
    return out


# -- party context ------------------------------------------------------------

@dataclass
class DspContext:
    """DSP party state: public key, DAP session, PRF stream, call counters."""

    pk: PublicKey
    session: Session
    prf: Prf
    enc: Encrypter = None
    stats: Counter = field(default_factory=Counter)
    role: str = "DSP"

    def __post_init__(self) -> None:
        if self.enc is None:
            self.enc = Encrypter(self.pk, rng=self.prf.child("encrypt"))

    @classmethod
    def create(cls, pk: PublicKey, session: Session, seed=None) -> "DspContext":
        return cls(pk, session, Prf(seed))

    def zero(self) -> Ciphertext:
        return trivial(self.pk, 0)

    def one(self) -> Ciphertext:
        return trivial(self.pk, 1)


# -- secure comparison / multiplication ---------------------------------------

def sic_batch(dsp: DspContext, pairs: Sequence[tuple[Ciphertext, Ciphertext]]) -> list[Ciphertext]:
    """Encrypted bits ``[a <= b]`` for every pair, in one round trip.

    The DAP sees ``±r * (1 - 2(a - b))`` with a private coin and ``r`` in
    ``[1, 2^40]``; callers keep ``2^41 * |a - b|`` below ``N/2``.
    """
    if not pairs:
        return []
    pk = dsp.pk
    one = trivial(pk, 1)
    coins = []
    w = dsp.session.writer().u32(len(pairs))
    for a, b in pairs:
        t = hom_add(one, scalar_mul(hom_add(a, scalar_mul(b, -1)), -2))
        r = dsp.prf.scalar(1 << SIC_BLIND_BITS)
        c = dsp.prf.bit()
        coins.append(c)
        w.ct(dsp.enc.rerandomize(scalar_mul(t, -r if c else r)))
    rd = dsp.session.request(MsgType.SIC, w)
    bits = rd.cts(len(pairs))
    rd.done()
    dsp.stats["sic"] += len(pairs)
    return [hom_add(one, scalar_mul(bit, -1)) if c else bit for bit, c in zip(bits, coins)]


def sic(dsp: DspContext, a: Ciphertext, b: Ciphertext) -> Ciphertext:
    return sic_batch(dsp, [(a, b)])[0]


def sm_batch(dsp: DspContext, pairs: Sequence[tuple[Ciphertext, Ciphertext]]) -> list[Ciphertext]:
    """Encrypted products, one round trip for the whole batch."""
    if not pairs:
        return []
    masks = []
    w = dsp.session.writer().u32(len(pairs))
    for x, y in pairs:
        rx = dsp.prf.randbelow(1 << SM_MASK_BITS)
        ry = dsp.prf.randbelow(1 << SM_MASK_BITS)
        masks.append((rx, ry))
        w.ct(dsp.enc.add_plain(x, rx)).ct(dsp.enc.add_plain(y, ry))
    rd = dsp.session.request(MsgType.SM, w)
    zs = rd.cts(len(pairs))
    rd.done()
    dsp.stats["sm"] += len(pairs)
    out = []
    for z, (x, y), (rx, ry) in zip(zs, pairs, masks):
        acc = hom_add(z, scalar_mul(x, -ry))
        acc = hom_add(acc, scalar_mul(y, -rx))
        out.append(add_plain(acc, -rx * ry))
    return out


def sm(dsp: DspContext, x: Ciphertext, y: Ciphertext) -> Ciphertext:
    return sm_batch(dsp, [(x, y)])[0]


def srelu_batch(dsp: DspContext, xs: Sequence[Ciphertext]) -> list[Ciphertext]:
    """``max(0, x)`` as ``SM(SIC(0, x), x)``, so both branches cost the same."""
    zero = dsp.zero()
    bits = sic_batch(dsp, [(zero, x) for x in xs])
    return sm_batch(dsp, list(zip(bits, xs)))


def srelu(dsp: DspContext, x: Ciphertext) -> Ciphertext:
    return srelu_batch(dsp, [x])[0]


def sqp_batch(dsp: DspContext, points: Sequence[Sequence[Ciphertext]],
              lo: Sequence[Ciphertext], hi: Sequence[Ciphertext]) -> list[Ciphertext]:
    """Encrypted bit per point: 1 iff ``lo <= p <= hi`` in every dimension."""
    d = len(lo)
    if len(hi) != d or any(len(p) != d for p in points):
        raise ValueError("dimension mismatch between points and query")
    if not points:
        return []
    pairs = []
    for p in points:
        for j in range(d):
            pairs.append((lo[j], p[j]))
            pairs.append((p[j], hi[j]))
    bits = sic_batch(dsp, pairs)
    k = 2 * d
    acc = [bits[i * k] for i in range(len(points))]
    for step in range(1, k):
        acc = sm_batch(dsp, [(acc[i], bits[i * k + step]) for i in range(len(points))])
    return acc


def sqp(dsp: DspContext, point: Sequence[Ciphertext], lo: Sequence[Ciphertext],
        hi: Sequence[Ciphertext]) -> Ciphertext:
    return sqp_batch(dsp, [point], lo, hi)[0]


def srand_batch(dsp: DspContext, ranges: Sequence[tuple[int, int]]) -> list[Ciphertext]:
    """Encrypted ids uniform in ``[lo, hi]`` that neither server learns.

    ``u = lo + ((a + b) mod M)`` with ``a`` drawn by the DSP and ``E(b)`` by the
    DAP; the reduction mod ``M`` is one secure comparison.
    """
    for lo, hi in ranges:
        if hi < lo or lo < 1:
            raise ValueError(f"empty or invalid range [{lo}, {hi}]")
    if not ranges:
        return []
    w = dsp.session.writer().u32(len(ranges))
    for lo, hi in ranges:
        w.u32(hi - lo + 1)
    rd = dsp.session.request(MsgType.RAND, w)
    shares = rd.cts(len(ranges))
    rd.done()
    sums = []
    for (lo, hi), eb in zip(ranges, shares):
        a = dsp.prf.randbelow(hi - lo + 1)
        sums.append(add_plain(eb, a))
    pk = dsp.pk
    wrap = sic_batch(dsp, [(trivial(pk, hi - lo + 1), s) for (lo, hi), s in zip(ranges, sums)])
    out = []
    for (lo, hi), s, bit in zip(ranges, sums, wrap):
        u = hom_add(s, scalar_mul(bit, -(hi - lo + 1)))
        out.append(dsp.enc.add_plain(u, lo))
    return out


def srand(dsp: DspContext, lo: int, hi: int, v: Ciphertext | None = None) -> Ciphertext:
    """Dummy bucket id; ``v`` is accepted for call-site symmetry and may collide."""
    return srand_batch(dsp, [(lo, hi)])[0]
