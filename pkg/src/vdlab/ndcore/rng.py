"""Counter-based random number generation.

The generator is Philox4x32-10 (Salmon et al., Random123). Every draw is a
pure function of (seed, stream_id, block index), so sequences are bit-identical
across runs, platforms and thread counts, and a stream can be split into
independent child streams without any shared mutable state.

Word layout, fixed forever (regression tests freeze it):

  key     = (seed lo32, seed hi32)
  counter = (block lo32, block hi32, stream_id lo32, stream_id hi32)

Each 128-bit block yields four 32-bit words (w0, w1, w2, w3), combined into
two 64-bit integers a = w0 | w1<<32 and b = w2 | w3<<32. Normal variates use
the Box-Muller transform:

  u1 = ((a >> 11) + 1) * 2**-53      in (0, 1]
  u2 = (b >> 11) * 2**-53            in [0, 1)
  r  = sqrt(-2 ln u1),  theta = 2 pi u2
  z0 = r cos theta,     z1 = r sin theta

so one block produces two normals; a draw of n values consumes ceil(n/2)
blocks and truncates the odd tail. Uniform draws consume one block per two
values the same way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError, SizeError

_M64 = 0xFFFFFFFFFFFFFFFF
_M32 = 0xFFFFFFFF

# Philox4x32 round multipliers and key schedule increments.
_PHILOX_SA = np.uint64(0xD2511F53)
_PHILOX_SB = np.uint64(0xCD9E8D57)
_PHILOX_WA = np.uint64(0x9E3779B9)
_PHILOX_WB = np.uint64(0xBB67AE85)

_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix_finalize(x: int) -> int:
    """Finalizer of the SplitMix64 generator; a 64-bit bijective mixer."""
    x &= _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


# Large requests run in cache-sized chunks; the rounds are pure per-block,
# so the split cannot change any output word.
_CHUNK_BLOCKS = 1 << 14


def _philox_blocks(seed: int, stream_id: int, start: int, n_blocks: int) -> np.ndarray:
    """Run Philox4x32-10 on n_blocks consecutive counters.

    Returns a (2, n_blocks) uint64 array: row 0 is w0|w1<<32, row 1 is
    w2|w3<<32. Vectorized over blocks; all lane values are 32-bit quantities
    carried in uint64 so products keep their high halves.
    """
    if n_blocks > _CHUNK_BLOCKS:
        out = np.empty((2, n_blocks), dtype=np.uint64)
        done = 0
        while done < n_blocks:
            n = min(_CHUNK_BLOCKS, n_blocks - done)
            out[:, done : done + n] = _philox_blocks(seed, stream_id, start + done, n)
            done += n
        return out
    blocks = (np.uint64(start & _M64) + np.arange(n_blocks, dtype=np.uint64)) & np.uint64(_M64)
    x0 = blocks & np.uint64(_M32)
    x1 = blocks >> np.uint64(32)
    x2 = np.full(n_blocks, stream_id & _M32, dtype=np.uint64)
    x3 = np.full(n_blocks, (stream_id >> 32) & _M32, dtype=np.uint64)
    k0 = np.uint64(seed & _M32)
    k1 = np.uint64((seed >> 32) & _M32)

    m32 = np.uint64(_M32)
    s32 = np.uint64(32)
    for r in range(10):
        p0 = _PHILOX_SA * x0
        p1 = _PHILOX_SB * x2
        lo0, hi0 = p0 & m32, p0 >> s32
        lo1, hi1 = p1 & m32, p1 >> s32
        x0, x1, x2, x3 = hi1 ^ x1 ^ k0, lo1, hi0 ^ x3 ^ k1, lo0
        if r < 9:
            k0 = (k0 + _PHILOX_WA) & m32
            k1 = (k1 + _PHILOX_WB) & m32

    out = np.empty((2, n_blocks), dtype=np.uint64)
    out[0] = x0 | (x1 << s32)
    out[1] = x2 | (x3 << s32)
    return out


@dataclass
class RngStream:
    """A single-consumer random stream addressed by (seed, stream_id, counter).

    `counter` is the next unused 64-bit block index. Draws advance it; two
    streams with distinct stream_ids never touch the same blocks, so they are
    statistically independent. Copy the dataclass to replay a sequence.
    """

    seed: int
    stream_id: int
    counter: int = 0

    def __post_init__(self):
        self.seed &= _M64
        self.stream_id &= _M64
        if self.counter < 0:
            raise ParameterError("counter must be non-negative")

    def child(self, index: int) -> "RngStream":
        """Derive an independent stream; pure in (seed, stream_id, index).

        The child id is a SplitMix64 mix of the parent id and the index, so
        children of distinct parents or indices collide only with ~2**-64
        probability. The parent is not advanced.
        """
        if index < 0:
            raise ParameterError("child index must be non-negative")
        sid = _splitmix_finalize(_splitmix_finalize(self.stream_id) ^ ((index + 1) * _GOLDEN))
        return RngStream(self.seed, sid, 0)

    def fork(self) -> "RngStream":
        """Derive a fresh stream and advance this one by a single tick.

        Successive forks of the same stream yield unrelated children because
        the current counter value enters the id derivation.
        """
        sid = _splitmix_finalize(
            _splitmix_finalize(self.stream_id ^ _GOLDEN) ^ ((self.counter + 1) * 0xC2B2AE3D27D4EB4F)
        )
        self.counter += 1
        return RngStream(self.seed, sid, 0)


def _draw_u64_pairs(rng: RngStream, n_blocks: int) -> np.ndarray:
    if n_blocks < 0:
        raise SizeError("block count must be non-negative")
    out = _philox_blocks(rng.seed, rng.stream_id, rng.counter, n_blocks)
    rng.counter += n_blocks
    return out


def uniform(rng: RngStream, shape) -> np.ndarray:
    """Uniform draws in [0, 1) with 53-bit resolution, float64."""
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not np.isscalar(shape) else (int(shape),)
    n = int(np.prod(shape)) if shape else 1
    if any(s <= 0 for s in shape):
        raise SizeError(f"non-positive extent in shape {shape}")
    nb = (n + 1) // 2
    words = _draw_u64_pairs(rng, nb)
    u = np.empty(2 * nb, dtype=np.float64)
    u[0::2] = (words[0] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    u[1::2] = (words[1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return u[:n].reshape(shape)


def gaussian(rng: RngStream, shape, dtype=np.float64) -> np.ndarray:
    """Standard normal draws via Box-Muller on Philox blocks.

    Consumes ceil(n/2) blocks for n values and advances `rng` by exactly
    that amount, independent of dtype.
    """
    if np.isscalar(shape):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise SizeError(f"non-positive extent in shape {shape}")
    n = int(np.prod(shape))
    nb = (n + 1) // 2
    words = _draw_u64_pairs(rng, nb)
    u1 = ((words[0] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0**-53
    u2 = (words[1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * np.pi) * u2
    z = np.empty(2 * nb, dtype=np.float64)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    out = z[:n].reshape(shape)
    return out.astype(dtype, copy=False)
