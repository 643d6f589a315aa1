"""Counter-based random streams.

Every draw is a pure function of ``(seed, replication, purpose, step, slot)``
via Philox, so a replication sees the same numbers whether it is
simulated alone, in a batch of ten thousand, or on another worker.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)


def philox4x32(counter, key, rounds: int = 10) -> np.ndarray:
    """Philox4x32 block function.

    ``counter`` has shape ``(..., 4)`` (uint32 words) and ``key`` is a pair of
    uint32 words. Returns an array of the same shape as ``counter``.
    """
    c = np.asarray(counter, dtype=np.uint64)
    c0, c1, c2, c3 = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for _ in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


def purpose_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8")) & 0xFFFFFFFF


@dataclass(frozen=True)
class RngStream:
    """Reproducible streams for a batch of replications.

    ``replications`` lists the replication indices, one per batch row. The
    ``prefix`` namespaces purposes so that sub-simulations (e.g. the shifted
    start of a jump term) never share draws with their parent.
    """

    seed: int
    replications: np.ndarray
    prefix: str = ""

    def __post_init__(self):
        reps = np.atleast_1d(np.asarray(self.replications, dtype=np.int64))
        if reps.ndim != 1:
            raise ValueError("replications must be one-dimensional")
        if reps.size and (reps.min() < 0 or reps.max() > 0xFFFFFFFF):
            raise ValueError("replication index out of 32-bit range")
        object.__setattr__(self, "replications", reps)

    @classmethod
    def for_range(cls, seed: int, start: int, stop: int, prefix: str = "") -> RngStream:
        return cls(seed, np.arange(start, stop), prefix)

    @property
    def size(self) -> int:
        return int(self.replications.size)

    def child(self, tag: str) -> RngStream:
        return RngStream(self.seed, self.replications, f"{self.prefix}{tag}/")

    def subset(self, mask) -> RngStream:
        return RngStream(self.seed, self.replications[mask], self.prefix)

    def _key(self):
        s = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        return s & 0xFFFFFFFF, s >> 32

    def bits(self, purpose: str, step: int, n_blocks: int) -> np.ndarray:
        """Raw uint32 words, shape ``(B, n_blocks, 4)``."""
        b = self.size
        ctr = np.empty((b, n_blocks, 4), dtype=np.uint64)
        ctr[..., 0] = self.replications[:, None]
        ctr[..., 1] = purpose_id(self.prefix + purpose)
        ctr[..., 2] = int(step) & 0xFFFFFFFF
        ctr[..., 3] = np.arange(n_blocks, dtype=np.uint64)[None, :]
        return philox4x32(ctr, self._key())

    def uniform(self, purpose: str, step: int, k: int = 1) -> np.ndarray:
        """Uniform doubles on [0, 1) with 53-bit resolution, shape ``(B, k)``."""
        words = self.bits(purpose, step, (k + 1) // 2).astype(np.uint64)
        words = words.reshape(self.size, -1, 2)
        a = words[..., 0] >> np.uint64(5)
        c = words[..., 1] >> np.uint64(6)
        u = (a.astype(np.float64) * 67108864.0 + c.astype(np.float64)) / 9007199254740992.0
        return u[:, :k]

    def normal(self, purpose: str, step: int, k: int = 1) -> np.ndarray:
        """Standard normals by Box-Muller, shape ``(B, k)``."""
        m = (k + 1) // 2
        u = self.uniform(purpose, step, 2 * m).reshape(self.size, m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[..., 0]))
        ang = 2.0 * np.pi * u[..., 1]
        z = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1).reshape(self.size, 2 * m)
        return z[:, :k]

    def normal_path(self, purpose: str, n_slots: int, k: int = 1) -> np.ndarray:
        """Standard normals for a whole path, shape ``(B, n_slots, k)``.

        Row ``j`` is the ``j``-th block of the replication's own stream, so it
        does not depend on which other replications share the batch. Uses
        numpy's Philox4x64 keyed by ``(seed, purpose)`` with the replication
        index in the counter.
        """
        key = (int(self.seed) & 0xFFFFFFFFFFFFFFFF) | (purpose_id(self.prefix + purpose) << 64)
        out = np.empty((self.size, n_slots, k))
        for row, rep in enumerate(self.replications):
            bg = np.random.Philox(counter=[0, 0, int(rep), 0], key=key)
            out[row] = np.random.Generator(bg).standard_normal((n_slots, k))
        return out

    def poisson(self, purpose: str, step: int, lam) -> np.ndarray:
        """Poisson counts by sequential inversion; ``lam`` broadcasts to ``(B, k)``."""
        lam = np.asarray(lam, dtype=np.float64)
        if lam.ndim == 0:
            lam = np.full((self.size, 1), float(lam))
        elif lam.ndim == 1:
            lam = np.broadcast_to(lam[:, None], (self.size, 1))
        k = lam.shape[1]
        u = self.uniform(purpose, step, k)
        count = np.zeros(lam.shape, dtype=np.int64)
        p = np.exp(-lam)
        cdf = p.copy()
        j = 0
        while True:
            more = (u > cdf) & (p > 0)
            if not more.any():
                break
            j += 1
            count += more
            p = p * lam / j
            cdf = cdf + p
            if j > 1000:
                raise FloatingPointError("Poisson inversion did not terminate")
        return count
