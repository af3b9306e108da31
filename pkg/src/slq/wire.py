"""Payload encoding shared by every message schema.

A payload starts with a 4-byte count of the ciphertexts it carries, which is
what the transcript records.  Ciphertexts are written length-prefixed at the
key's fixed width and signed plaintexts at a fixed width too, so a message's
byte length depends only on how many fields it carries.
"""
from __future__ import annotations

import struct

from .paillier import Ciphertext, PublicKey


class WireError(ValueError):
    pass


def sint_width(pk: PublicKey) -> int:
    return pk.bits // 8 + 2


class Writer:
    def __init__(self, pk: PublicKey) -> None:
        self.pk = pk
        self.ct_count = 0
        self._buf = bytearray()
        self._ctw = pk.ct_bytes
        self._ctprefix = struct.pack(">I", self._ctw)
        self._sw = sint_width(pk)

    def u8(self, v: int) -> "Writer":
        self._buf += struct.pack(">B", v)
        return self

    def u32(self, v: int) -> "Writer":
        self._buf += struct.pack(">I", v)
        return self

    def raw(self, data: bytes) -> "Writer":
        self._buf += data
        return self

    def sint(self, v: int) -> "Writer":
        self._buf += v.to_bytes(self._sw, "big", signed=True)
        return self

    def sints(self, vs) -> "Writer":
        for v in vs:
            self.sint(v)
        return self

    def ct(self, c: Ciphertext) -> "Writer":
        self._buf += self._ctprefix
        self._buf += c.value.to_bytes(self._ctw, "big")
        self.ct_count += 1
        return self

    def cts(self, cs) -> "Writer":
        for c in cs:
            self.ct(c)
        return self

    def payload(self) -> bytes:
        return struct.pack(">I", self.ct_count) + bytes(self._buf)


class Reader:
    def __init__(self, pk: PublicKey, payload: bytes) -> None:
        if len(payload) < 4:
            raise WireError("payload shorter than its header")
        self.pk = pk
        self.data = payload
        (self.ct_count,) = struct.unpack_from(">I", payload, 0)
        self.off = 4
        self._sw = sint_width(pk)

    def _take(self, n: int) -> bytes:
        end = self.off + n
        if end > len(self.data):
            raise WireError("truncated payload")
        chunk = self.data[self.off:end]
        self.off = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def sint(self) -> int:
        return int.from_bytes(self._take(self._sw), "big", signed=True)

    def sints(self, n: int) -> list[int]:
        return [self.sint() for _ in range(n)]

    def ct(self) -> Ciphertext:
        (length,) = struct.unpack(">I", self._take(4))
        value = int.from_bytes(self._take(length), "big")
        if value >= self.pk.nsquare:
            raise WireError("ciphertext outside Z_{N^2}")
        return Ciphertext(value, self.pk)

    def cts(self, n: int) -> list[Ciphertext]:
        if n > (len(self.data) - self.off) // 4:
            raise WireError("ciphertext count exceeds payload")
        return [self.ct() for _ in range(n)]

    def done(self) -> None:
        if self.off != len(self.data):
            raise WireError(f"{len(self.data) - self.off} trailing bytes in payload")
