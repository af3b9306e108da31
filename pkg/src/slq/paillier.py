"""Paillier cryptosystem with signed plaintexts.

Plaintexts live in ``Z_N`` and are read back as signed integers: residues
above ``N/2`` decode as ``v - N``.  The generator is fixed to ``g = N + 1`` so
that ``g^m = 1 + m*N (mod N^2)`` and encryption costs one exponentiation.

Key material and ciphertexts are immutable.  Randomness is drawn from an
explicit ``rng`` object exposing ``randbelow(n)`` so tests can seed it.
"""
from __future__ import annotations

import hashlib
import secrets
import struct
from dataclasses import dataclass, field
from typing import Protocol

import gmpy2
from gmpy2 import mpz

ALLOWED_BITS = (512, 1024, 2048, 3072, 4096)
KEY_MAGIC = b"SLQK"
KEY_VERSION = 1
MR_ROUNDS = 64


class PaillierError(ValueError):
    """Raised on key mismatch, out-of-domain plaintexts or malformed input."""


class Rng(Protocol):
    def randbelow(self, n: int) -> int: ...


class SystemRng:
    """Cryptographic randomness from the OS."""

    def randbelow(self, n: int) -> int:
        return secrets.randbelow(n)


_SYSTEM_RNG = SystemRng()


def _rng(rng: Rng | None) -> Rng:
    return _SYSTEM_RNG if rng is None else rng


@dataclass(frozen=True)
class PublicKey:
    n: int
    g: int
    bits: int
    nsquare: int = field(init=False, repr=False, compare=False)
    key_id: bytes = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "nsquare", self.n * self.n)
        digest = hashlib.sha256(self.n.to_bytes((self.n.bit_length() + 7) // 8, "big"))
        object.__setattr__(self, "key_id", digest.digest()[:16])

    @property
    def half(self) -> int:
        return self.n // 2

    @property
    def ct_bytes(self) -> int:
        """Fixed wire width of a ciphertext."""
        return (2 * self.bits + 7) // 8

    @property
    def plaintext_bits(self) -> int:
        """Bits usable for non-negative packed plaintexts (stays below N/2)."""
        return self.n.bit_length() - 2

    def encode(self, m: int) -> int:
        if not -self.half <= m <= self.half:
            raise PaillierError(f"plaintext out of signed domain ({m.bit_length()} bits)")
        return m % self.n

    def decode(self, v: int) -> int:
        return v - self.n if v > self.half else v

    def raw_encrypt(self, m: int, rng: Rng | None = None) -> "Ciphertext":
        """Textbook encryption: (1 + mN) * r^N mod N^2."""
        rng = _rng(rng)
        n, n2 = self.n, self.nsquare
        while True:
            r = rng.randbelow(n)
            if r > 1 and gmpy2.gcd(r, n) == 1:
                break
        obf = gmpy2.powmod(mpz(r), n, n2)
        return Ciphertext(int((1 + self.encode(m) * n) * obf % n2), self)


@dataclass(frozen=True)
class SecretKey:
    p: int
    q: int
    lam: int
    mu: int

    def __post_init__(self) -> None:
        p, q = mpz(self.p), mpz(self.q)
        psq, qsq = p * p, q * q
        object.__setattr__(self, "_psq", psq)
        object.__setattr__(self, "_qsq", qsq)
        n = p * q
        # h_p = L_p(g^(p-1) mod p^2)^-1 mod p with g = n + 1
        object.__setattr__(self, "_hp", gmpy2.invert(((1 + n * (p - 1)) % psq - 1) // p, p))
        object.__setattr__(self, "_hq", gmpy2.invert(((1 + n * (q - 1)) % qsq - 1) // q, q))
        object.__setattr__(self, "_pinv", gmpy2.invert(p, q))
        # r^N mod p^2 only depends on N mod p(p-1)
        object.__setattr__(self, "_ep", n % (p * (p - 1)))
        object.__setattr__(self, "_eq", n % (q * (q - 1)))
        object.__setattr__(self, "_psq_inv", gmpy2.invert(psq, qsq))

    def raw_decrypt(self, value: int) -> int:
        p, q = self.p, self.q
        c = mpz(value)
        mp = (gmpy2.powmod(c, p - 1, self._psq) - 1) // p * self._hp % p
        mq = (gmpy2.powmod(c, q - 1, self._qsq) - 1) // q * self._hq % q
        return int(mp + p * ((mq - mp) * self._pinv % q))

    def obfuscator(self, n: int, rng: Rng) -> int:
        """r^N mod N^2 computed through CRT on p^2 and q^2."""
        while True:
            r = rng.randbelow(n)
            if r > 1 and gmpy2.gcd(r, n) == 1:
                break
        r = mpz(r)
        xp = gmpy2.powmod(r, self._ep, self._psq)
        xq = gmpy2.powmod(r, self._eq, self._qsq)
        return int(xp + self._psq * ((xq - xp) * self._psq_inv % self._qsq))


@dataclass(frozen=True)
class KeyPair:
    pk: PublicKey
    sk: SecretKey

    @property
    def bits(self) -> int:
        return self.pk.bits


@dataclass(frozen=True)
class Ciphertext:
    value: int
    pk: PublicKey = field(repr=False, compare=False)

    @property
    def key_id(self) -> bytes:
        return self.pk.key_id

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Ciphertext):
            return NotImplemented
        return self.value == other.value and self.key_id == other.key_id

    def __hash__(self) -> int:
        return hash(self.value)

    def __add__(self, other: "Ciphertext") -> "Ciphertext":
        return hom_add(self, other)

    def __sub__(self, other: "Ciphertext") -> "Ciphertext":
        return hom_add(self, scalar_mul(other, -1))

    def __neg__(self) -> "Ciphertext":
        return scalar_mul(self, -1)

    def __mul__(self, k: int) -> "Ciphertext":
        return scalar_mul(self, k)

    __rmul__ = __mul__


def _random_prime(bits: int, rng: Rng) -> int:
    while True:
        cand = rng.randbelow(1 << bits) | (3 << (bits - 2)) | 1
        if gmpy2.is_prime(cand, MR_ROUNDS):
            return int(cand)


def keygen(bits: int = 1024, rng: Rng | None = None) -> KeyPair:
    """Generate a key pair whose modulus has exactly ``bits`` bits."""
    if bits not in ALLOWED_BITS:
        raise PaillierError(f"key length must be one of {ALLOWED_BITS}, got {bits}")
    rng = _rng(rng)
    half = bits // 2
    while True:
        p = _random_prime(half, rng)
        q = _random_prime(bits - half, rng)
        n = p * q
        if p != q and n.bit_length() == bits and gmpy2.gcd(n, (p - 1) * (q - 1)) == 1:
            break
    lam = (p - 1) * (q - 1)
    mu = int(gmpy2.invert(lam, n))
    return KeyPair(PublicKey(n, n + 1, bits), SecretKey(p, q, lam, mu))


def encrypt(pk: PublicKey, m: int, rng: Rng | None = None) -> Ciphertext:
    return pk.raw_encrypt(m, rng)


def _check_ct(pk: PublicKey, c: Ciphertext) -> None:
    if c.key_id != pk.key_id:
        raise PaillierError("ciphertext was produced under a different key")
    if not 0 <= c.value < pk.nsquare:
        raise PaillierError("ciphertext value outside Z_{N^2}")


def decrypt(keys: KeyPair, c: Ciphertext) -> int:
    _check_ct(keys.pk, c)
    if gmpy2.gcd(c.value, keys.pk.n) != 1:
        raise PaillierError("ciphertext not invertible mod N")
    return keys.pk.decode(keys.sk.raw_decrypt(c.value))


def decrypt_textbook(keys: KeyPair, c: Ciphertext) -> int:
    """Decrypt with L(c^lambda mod N^2) * mu mod N, without CRT."""
    _check_ct(keys.pk, c)
    n = keys.pk.n
    u = gmpy2.powmod(mpz(c.value), keys.sk.lam, keys.pk.nsquare)
    return keys.pk.decode(int((u - 1) // n * keys.sk.mu % n))


def hom_add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    if c1.key_id != c2.key_id:
        raise PaillierError("cannot add ciphertexts under different keys")
    pk = c1.pk
    return Ciphertext(c1.value * c2.value % pk.nsquare, pk)


def scalar_mul(c: Ciphertext, k: int) -> Ciphertext:
    """Ciphertext of ``k * x``; negative ``k`` goes through the modular inverse."""
    pk = c.pk
    if k == 0:
        return Ciphertext(1, pk)
    if k < 0:
        base = gmpy2.invert(mpz(c.value), pk.nsquare)
        k = -k
    else:
        base = mpz(c.value)
    if k == 1:
        return Ciphertext(int(base), pk)
    return Ciphertext(int(gmpy2.powmod(base, k, pk.nsquare)), pk)


def add_plain(c: Ciphertext, k: int) -> Ciphertext:
    """Deterministic ``E(x + k)``; does not re-randomize."""
    pk = c.pk
    return Ciphertext(c.value * ((1 + (k % pk.n) * pk.n) % pk.nsquare) % pk.nsquare, pk)


def trivial(pk: PublicKey, m: int) -> Ciphertext:
    """Noise-free encoding ``1 + mN``; only for DSP-internal arithmetic."""
    return Ciphertext((1 + pk.encode(m) * pk.n) % pk.nsquare, pk)


class _FixedBase:
    """Powers of one base through a precomputed table of 8-bit windows."""

    WINDOW = 8

    def __init__(self, base, modulus, exp_bits: int) -> None:
        self.modulus = mpz(modulus)
        size = 1 << self.WINDOW
        self.table = []
        b = mpz(base)
        for _ in range(-(-exp_bits // self.WINDOW)):
            row = [mpz(1)]
            for _ in range(1, size):
                row.append(row[-1] * b % self.modulus)
            self.table.append(row)
            b = row[-1] * b % self.modulus

    def pow(self, e: int) -> mpz:
        acc = mpz(1)
        mask = (1 << self.WINDOW) - 1
        for row in self.table:
            if not e:
                break
            w = e & mask
            if w:
                acc = acc * row[w] % self.modulus
            e >>= self.WINDOW
        return acc


class Encrypter:
    """Fast encryption bound to one key and one randomness source.

    A base ``h = r0^N`` is fixed once (through CRT when the secret key is at
    hand) and every obfuscator is ``h^t`` for a short random exponent ``t``,
    evaluated from a fixed-base window table.
    """

    def __init__(self, pk: PublicKey, rng: Rng | None = None, sk: SecretKey | None = None,
                 short_exponent_bits: int | None = None) -> None:
        self.pk = pk
        self.sk = sk
        self.rng = _rng(rng)
        self._n = mpz(pk.n)
        self._n2 = mpz(pk.nsquare)
        self._texp = short_exponent_bits or max(128, pk.bits // 4)
        if sk is not None:
            h = sk.obfuscator(pk.n, self.rng)
        else:
            h = pk.raw_encrypt(0, self.rng).value
        self._fixed = _FixedBase(h, self._n2, self._texp)

    def obfuscator(self) -> int:
        t = self.rng.randbelow(1 << self._texp) | 1
        return self._fixed.pow(t)

    def encrypt(self, m: int) -> Ciphertext:
        pk = self.pk
        return Ciphertext(int((1 + pk.encode(m) * self._n) * self.obfuscator() % self._n2), pk)

    def rerandomize(self, c: Ciphertext) -> Ciphertext:
        return Ciphertext(int(mpz(c.value) * self.obfuscator() % self._n2), self.pk)

    def add_plain(self, c: Ciphertext, k: int) -> Ciphertext:
        """Re-randomized ``E(x + k)``."""
        pk = self.pk
        v = mpz(c.value) * ((1 + (k % pk.n) * self._n) % self._n2) % self._n2
        return Ciphertext(int(v * self.obfuscator() % self._n2), pk)


# -- serialization -----------------------------------------------------------

def int_to_bytes(v: int) -> bytes:
    return v.to_bytes(max(1, (v.bit_length() + 7) // 8), "big")


def serialize_ct(c: Ciphertext, width: int | None = None) -> bytes:
    """4-byte big-endian length, then the value (minimal length unless ``width``)."""
    body = int_to_bytes(c.value) if width is None else c.value.to_bytes(width, "big")
    return struct.pack(">I", len(body)) + body


def deserialize_ct(buf: bytes, pk: PublicKey, offset: int = 0) -> tuple[Ciphertext, int]:
    """Parse one ciphertext at ``offset``; returns it and the next offset."""
    if len(buf) - offset < 4:
        raise PaillierError("truncated ciphertext: missing length prefix")
    (length,) = struct.unpack_from(">I", buf, offset)
    end = offset + 4 + length
    if length == 0 or end > len(buf):
        raise PaillierError("ciphertext length prefix exceeds buffer")
    value = int.from_bytes(buf[offset + 4:end], "big")
    if value >= pk.nsquare:
        raise PaillierError("ciphertext value outside Z_{N^2}")
    return Ciphertext(value, pk), end


def _put_int(out: bytearray, v: int) -> None:
    body = int_to_bytes(v)
    out += struct.pack(">I", len(body)) + body


def _get_int(buf: bytes, off: int) -> tuple[int, int]:
    if len(buf) - off < 4:
        raise PaillierError("truncated key file")
    (length,) = struct.unpack_from(">I", buf, off)
    end = off + 4 + length
    if end > len(buf):
        raise PaillierError("truncated key file")
    return int.from_bytes(buf[off + 4:end], "big"), end


def dump_public_key(pk: PublicKey) -> bytes:
    out = bytearray(KEY_MAGIC)
    out += struct.pack(">BB", KEY_VERSION, 0)
    for v in (pk.bits, pk.n, pk.g):
        _put_int(out, v)
    return bytes(out)


def dump_secret_key(keys: KeyPair) -> bytes:
    out = bytearray(KEY_MAGIC)
    out += struct.pack(">BB", KEY_VERSION, 1)
    sk = keys.sk
    for v in (keys.pk.bits, keys.pk.n, keys.pk.g, sk.lam, sk.mu, sk.p, sk.q):
        _put_int(out, v)
    return bytes(out)


def _parse_header(buf: bytes) -> tuple[int, int]:
    if buf[:4] != KEY_MAGIC:
        raise PaillierError("bad key file magic")
    if len(buf) < 6 or buf[4] != KEY_VERSION:
        raise PaillierError("unsupported key file version")
    return buf[5], 6


def load_public_key(buf: bytes) -> PublicKey:
    _, off = _parse_header(buf)
    bits, off = _get_int(buf, off)
    n, off = _get_int(buf, off)
    g, off = _get_int(buf, off)
    return PublicKey(n, g, bits)


def load_keypair(buf: bytes) -> KeyPair:
    kind, off = _parse_header(buf)
    if kind != 1:
        raise PaillierError("file holds a public key only")
    vals = []
    for _ in range(7):
        v, off = _get_int(buf, off)
        vals.append(v)
    bits, n, g, lam, mu, p, q = vals
    return KeyPair(PublicKey(n, g, bits), SecretKey(p, q, lam, mu))
