"""Counter-based Gaussian streams (Philox4x32-10).

Every particle owns its own stream, addressed by ``(seed, stream_id)``; the
draw for a given time step is a pure function of ``(seed, stream_id, step)``.
This makes simulations independent of how particles are split across
workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_SHIFT32 = np.uint64(32)

# purpose tags for counter word 1
NORMAL = 0
UNIFORM = 1


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function, vectorized over the leading axis.

    Parameters
    ----------
    counter : array_like of shape (4,) or (n, 4)
        Counter words, each < 2**32.
    key : array_like of shape (2,) or (n, 2)
        Key words, each < 2**32.

    Returns
    -------
    ndarray of uint64, shape (n, 4), each entry < 2**32.
    """
    ctr = np.atleast_2d(np.asarray(counter, dtype=np.uint64))
    k = np.atleast_2d(np.asarray(key, dtype=np.uint64))
    n = ctr.shape[0]
    c0, c1, c2, c3 = (np.ascontiguousarray(ctr[:, i]) for i in range(4))
    p0 = np.empty(n, dtype=np.uint64)
    p1 = np.empty(n, dtype=np.uint64)
    for r in range(rounds):
        # round keys; scalar when a single key is shared by all counters
        if k.shape[0] == 1:
            k0 = np.uint64((int(k[0, 0]) + r * _W0) & 0xFFFFFFFF)
            k1 = np.uint64((int(k[0, 1]) + r * _W1) & 0xFFFFFFFF)
        else:
            k0 = (k[:, 0] + np.uint64(r * _W0)) & _MASK32
            k1 = (k[:, 1] + np.uint64(r * _W1)) & _MASK32
        np.multiply(c0, _M0, out=p0)
        np.multiply(c2, _M1, out=p1)
        np.bitwise_xor(c1, p1 >> _SHIFT32, out=c1)
        np.bitwise_xor(c1, k0, out=c1)
        np.bitwise_xor(c3, p0 >> _SHIFT32, out=c3)
        np.bitwise_xor(c3, k1, out=c3)
        np.bitwise_and(p1, _MASK32, out=p1)
        np.bitwise_and(p0, _MASK32, out=p0)
        # rotate buffers: (c0, c1, c2, c3) <- (hi1^c1^k0, lo1, hi0^c3^k1, lo0)
        c0, c1, c2, c3, p0, p1 = c1, p1, c3, p0, c0, c2
    return np.stack([c0, c1, c2, c3], axis=1)


@dataclass(frozen=True)
class RngSpec:
    """Master seed plus the stream id assigned to particle 0.

    Particle ``i`` uses stream ``stream_offset + i``; two runs that must be
    statistically independent should use disjoint stream ranges or seeds.
    """

    seed: int = 0
    stream_offset: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.stream_offset < 0:
            raise ValueError("stream_offset must be nonnegative")

    @property
    def key(self) -> np.ndarray:
        s = int(self.seed)
        return np.array([s & 0xFFFFFFFF, s >> 32], dtype=np.uint64)

    def streams(self, particles) -> np.ndarray:
        return np.asarray(particles, dtype=np.uint64) + np.uint64(self.stream_offset)

    def spawn(self, offset: int) -> "RngSpec":
        """Same seed, stream range shifted by ``offset``."""
        return RngSpec(self.seed, self.stream_offset + offset)


def _blocks(spec: RngSpec, particles, step: int, purpose: int, nblocks: int) -> np.ndarray:
    """Raw words, shape (len(particles), 4 * nblocks)."""
    streams = spec.streams(particles)
    n = streams.shape[0]
    out = np.empty((n, 4 * nblocks), dtype=np.uint64)
    ctr = np.empty((n, 4), dtype=np.uint64)
    ctr[:, 0] = np.uint64(step & 0xFFFFFFFF)
    ctr[:, 2] = streams & _MASK32
    ctr[:, 3] = streams >> _SHIFT32
    for j in range(nblocks):
        ctr[:, 1] = np.uint64((purpose << 16) | j)
        out[:, 4 * j:4 * j + 4] = philox4x32(ctr, spec.key)
    return out


def _to_unit(hi, lo) -> np.ndarray:
    # 53-bit float strictly inside (0, 1)
    a = (hi >> np.uint64(5)).astype(np.float64)
    b = (lo >> np.uint64(6)).astype(np.float64)
    return (a * 67108864.0 + b + 0.5) * (1.0 / 9007199254740992.0)


def uniforms(spec: RngSpec, particles, step: int, count: int) -> np.ndarray:
    """Uniforms in (0, 1), shape (len(particles), count)."""
    words = _blocks(spec, particles, step, UNIFORM, (count + 1) // 2)
    u = _to_unit(words[:, 0::2], words[:, 1::2])
    return u[:, :count]


def normals(spec: RngSpec, particles, step: int, count: int) -> np.ndarray:
    """Standard normals via Box-Muller, shape (len(particles), count)."""
    nblocks = (count + 1) // 2
    words = _blocks(spec, particles, step, NORMAL, nblocks)
    u1 = _to_unit(words[:, 0::4], words[:, 1::4])
    u2 = _to_unit(words[:, 2::4], words[:, 3::4])
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty((words.shape[0], 2 * nblocks))
    z[:, 0::2] = r * np.cos(theta)
    z[:, 1::2] = r * np.sin(theta)
    return z[:, :count]
