"""Additively homomorphic stand-ins used by the secure-aggregation layer."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

FIXED_POINT_BITS = 32
_SCALE = float(2 ** FIXED_POINT_BITS)


class BackendError(RuntimeError):
    pass


@dataclass(frozen=True)
class Ciphertext:
    payload: bytes
    length: int
    backend_tag: str


@dataclass(frozen=True)
class EncryptionContext:
    """Who encrypts for which aggregation; masks are derived from it."""

    session: int
    round: int
    group_id: str
    member: int
    members: tuple


class Backend:
    tag = "abstract"
    tolerance = 0.0

    def encrypt(self, values: np.ndarray, ctx: EncryptionContext) -> Ciphertext:
        raise NotImplementedError

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        raise NotImplementedError

    def decrypt(self, c: Ciphertext) -> np.ndarray:
        raise NotImplementedError

    def aggregate(self, cts: Sequence[Ciphertext]) -> Ciphertext:
        if not cts:
            raise BackendError("nothing to aggregate")
        acc = cts[0]
        for c in cts[1:]:
            acc = self.add(acc, c)
        return acc

    def _check(self, a: Ciphertext, b: Ciphertext) -> None:
        if a.backend_tag != self.tag or b.backend_tag != self.tag:
            raise BackendError("ciphertext from a different backend")
        if a.length != b.length:
            raise BackendError(f"length mismatch {a.length} != {b.length}")


class MockBackend(Backend):
    """Plain float64 pass-through with the same message pattern."""

    tag = "mock"
    tolerance = 0.0

    def encrypt(self, values, ctx=None):
        v = np.ascontiguousarray(values, dtype="<f8")
        return Ciphertext(v.tobytes(), int(v.size), self.tag)

    def add(self, a, b):
        self._check(a, b)
        s = np.frombuffer(a.payload, dtype="<f8") + np.frombuffer(b.payload, dtype="<f8")
        return Ciphertext(s.tobytes(), a.length, self.tag)

    def decrypt(self, c):
        return np.frombuffer(c.payload, dtype="<f8").astype(np.float64)


class MaskBackend(Backend):
    """Fixed-point encoding with pairwise additive masks that cancel in the full sum.

    Values are scaled by 2^32 and held as residues mod 2^64, so wrap-around is
    harmless as long as the true sum stays below 2^31 in magnitude. A single
    ciphertext decrypts to noise unless every member of the group is included.
    """

    tag = "mask"
    tolerance = 1e-6

    @staticmethod
    def _pair_mask(ctx: EncryptionContext, a: int, b: int, length: int) -> np.ndarray:
        key = [ctx.session & 0xFFFFFFFF, ctx.round, zlib.crc32(ctx.group_id.encode()), a, b]
        ss = np.random.SeedSequence(key)
        return np.random.default_rng(ss).integers(0, 2 ** 64, size=length, dtype=np.uint64, endpoint=False)

    def encrypt(self, values, ctx: EncryptionContext):
        v = np.asarray(values, dtype=np.float64)
        if np.any(np.abs(v) >= 2.0 ** 31):
            raise BackendError("value out of fixed-point range")
        enc = np.rint(v * _SCALE).astype(np.int64).view(np.uint64)
        for other in ctx.members:
            if other == ctx.member:
                continue
            lo, hi = min(other, ctx.member), max(other, ctx.member)
            m = self._pair_mask(ctx, lo, hi, v.size)
            enc = enc + m if ctx.member == lo else enc - m
        return Ciphertext(np.ascontiguousarray(enc, dtype="<u8").tobytes(), int(v.size), self.tag)

    def add(self, a, b):
        self._check(a, b)
        s = np.frombuffer(a.payload, dtype="<u8") + np.frombuffer(b.payload, dtype="<u8")
        return Ciphertext(s.tobytes(), a.length, self.tag)

    def decrypt(self, c):
        raw = np.frombuffer(c.payload, dtype="<u8").astype(np.uint64)
        return raw.view(np.int64).astype(np.float64) / _SCALE


def make_backend(name: str) -> Backend:
    if name == "mock":
        return MockBackend()
    if name == "mask":
        return MaskBackend()
    raise BackendError(f"unknown backend {name!r}")
