"""Deterministic, label-keyed random streams.

Frozen stream algorithm (format version 1):

* key   = BLAKE2b-128(seed as 8 little-endian bytes || label as UTF-8),
          personalised with ``b"dpjl-rng-v1"``; read as a little-endian
          128-bit integer.
* words = Philox4x64-10 keyed by ``key``, counter starting at 0, as exposed
          by ``numpy.random.Philox`` (numpy guarantees bit-stream stability
          for its bit generators).
* uniform doubles are ``(word >> 11) * 2**-53`` in [0, 1).
* standard normals use the polar Box--Muller method, refilled in blocks of
  ``NORMAL_BLOCK`` uniform pairs.  Accepted pairs are emitted in order, so
  the normal sequence of a stream does not depend on how draws are chunked.

Changing any of the above changes every seeded result in the package.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream", "derive_stream", "sample_std_gaussian", "NORMAL_BLOCK"]

NORMAL_BLOCK = 4096
_PERSON = b"dpjl-rng-v1"
_MASK64 = (1 << 64) - 1


def _stream_key(seed: int, label: str) -> int:
    h = hashlib.blake2b(
        int(seed).to_bytes(8, "little") + label.encode("utf-8"),
        digest_size=16,
        person=_PERSON,
    )
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """A single-owner random stream identified by ``(seed, label)``.

    ``counter`` is the number of 64-bit words consumed so far.  Do not share a
    stream between concurrent tasks; derive a child stream per task instead.
    """

    def __init__(self, seed: int, label: str):
        if not 0 <= int(seed) <= _MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream_label = str(label)
        self._bitgen = np.random.Philox(key=_stream_key(self.seed, self.stream_label))
        self.counter = 0
        self._normals = np.empty(0)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.stream_label!r}, counter={self.counter})"

    def child(self, label: str) -> "RngStream":
        return derive_stream(self.seed, f"{self.stream_label}/{label}")

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` 64-bit words."""
        out = self._bitgen.random_raw(int(n))
        self.counter += int(n)
        return np.asarray(out, dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random bits each."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) (Lemire's multiply-shift with rejection)."""
        if n <= 0:
            raise ValueError("n must be positive")
        threshold = ((1 << 64) - n) % n
        while True:
            x = int(self.raw(1)[0])
            m = x * n
            if (m & _MASK64) >= threshold:
                return m >> 64

    def randbelow_many(self, bounds) -> np.ndarray:
        """Unbiased integers in [0, bounds[i]) for every i, vectorized.

        One word is drawn per entry (multiply-shift with rejection); entries
        whose word is rejected are redrawn, in index order, from the next
        words.  Bounds must lie in [1, 2**32) so the 128-bit product splits
        into 32-bit halves.
        """
        bounds = np.asarray(bounds, dtype=np.uint64).ravel()
        out = np.empty(bounds.size, dtype=np.int64)
        if not bounds.size:
            return out
        if bounds.min() == 0 or bounds.max() >= 1 << 32:
            raise ValueError("bounds must lie in [1, 2**32)")
        # (2**64 - n) % n, computed in 64 bits as (-n mod 2**64) % n
        thresholds = (np.uint64(0) - bounds) % bounds
        pending = np.arange(bounds.size)
        while pending.size:
            n, th = bounds[pending], thresholds[pending]
            x = self.raw(n.size)
            hi, lo = x >> np.uint64(32), x & np.uint64(0xFFFFFFFF)
            low64 = x * n  # wraps modulo 2**64
            high64 = (hi * n + ((lo * n) >> np.uint64(32))) >> np.uint64(32)
            ok = low64 >= th
            out[pending[ok]] = high64[ok]
            pending = pending[~ok]
        return out

    def _refill(self):
        u = 2.0 * self.uniform(2 * NORMAL_BLOCK) - 1.0
        x, y = u[0::2], u[1::2]
        s = x * x + y * y
        ok = (s > 0.0) & (s < 1.0)
        x, y, s = x[ok], y[ok], s[ok]
        f = np.sqrt(-2.0 * np.log(s) / s)
        block = np.empty(2 * x.size)
        block[0::2] = x * f
        block[1::2] = y * f
        self._normals = np.concatenate([self._normals, block])

    def standard_normal(self, n: int) -> np.ndarray:
        n = int(n)
        while self._normals.size < n:
            self._refill()
        out, self._normals = self._normals[:n], self._normals[n:]
        return out.copy()


def derive_stream(seed: int, label: str) -> RngStream:
    """Fresh stream for ``(seed, label)``; counter starts at 0."""
    return RngStream(seed, label)


def sample_std_gaussian(rng: RngStream, n: int) -> np.ndarray:
    """``n`` i.i.d. N(0, 1) draws from ``rng`` (polar Box--Muller)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return rng.standard_normal(n)
