"""Counter-based random streams.

Every Monte Carlo sample draws from its own Philox4x64-10 stream keyed by the
campaign seed, with the sample index placed in the counter.  Sample ``i`` of a
campaign therefore sees the same numbers no matter how the index range is
split across workers.

The block function is bit-compatible with :class:`numpy.random.Philox`: block
``b`` of stream ``(seed, index)`` equals the ``b``-th 4-word output of
``Philox(key=[seed_lo, seed_hi], counter=[0, 0, index, 0])``.
"""

import numba as nb
import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TO_UNIT = 1.0 / 9007199254740992.0  # 2**-53

MASK64 = (1 << 64) - 1


@nb.njit(inline="always", cache=True)
def _mulhilo(a, b):
    a_lo = a & _LO32
    a_hi = a >> _S32
    b_lo = b & _LO32
    b_hi = b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _LO32) + (hl & _LO32)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    return hi, a * b


@nb.njit(cache=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    """Ten-round Philox4x64 bijection of one 256-bit counter block."""
    for r in range(10):
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        if r < 9:
            k0 = k0 + _W0
            k1 = k1 + _W1
    return c0, c1, c2, c3


@nb.njit(cache=True)
def fill_uniform(out, k0, k1, index, stream):
    """Fill ``out`` with doubles in [0, 1) from stream ``(key, index)``.

    ``stream`` selects an independent sub-stream (counter word 3) so that one
    sample can own several uncorrelated sequences.
    """
    n = out.shape[0]
    block = np.uint64(0)
    pos = 0
    while pos < n:
        block = block + _ONE
        r0, r1, r2, r3 = philox4x64(block, np.uint64(0), index, stream, k0, k1)
        out[pos] = (r0 >> _S11) * _TO_UNIT
        if pos + 1 < n:
            out[pos + 1] = (r1 >> _S11) * _TO_UNIT
        if pos + 2 < n:
            out[pos + 2] = (r2 >> _S11) * _TO_UNIT
        if pos + 3 < n:
            out[pos + 3] = (r3 >> _S11) * _TO_UNIT
        pos += 4


def split_seed(seed: int) -> tuple[np.uint64, np.uint64]:
    """Split a non-negative integer seed (< 2**128) into the two key words."""
    if seed < 0 or seed >> 128:
        raise ValueError(f"seed must be in [0, 2**128), got {seed}")
    return np.uint64(seed & MASK64), np.uint64(seed >> 64)


class SampleStream:
    """Sequential uniform draws from the stream of one sample.

    Thin Python-side wrapper used outside the compiled kernels (conformation
    sampling for single evaluations, optimizer restarts, robustness scans).
    """

    def __init__(self, seed: int, index: int, stream: int = 0, buffer: int = 64):
        self._k0, self._k1 = split_seed(seed)
        self._index = np.uint64(index)
        self._stream = np.uint64(stream)
        self._block = 0
        self._buf = np.empty(0)
        self._pos = 0
        self._size = buffer

    def _refill(self):
        # blocks are consumed in order; regenerate the next ``size`` words
        bits = np.random.Philox(
            key=[int(self._k0), int(self._k1)],
            counter=[self._block, 0, int(self._index), int(self._stream)],
        ).random_raw(self._size)
        self._block += self._size // 4
        self._buf = (bits >> np.uint64(11)) * _TO_UNIT
        self._pos = 0

    def uniform(self, n: int) -> np.ndarray:
        out = np.empty(n)
        got = 0
        while got < n:
            if self._pos >= self._buf.size:
                self._refill()
            take = min(n - got, self._buf.size - self._pos)
            out[got:got + take] = self._buf[self._pos:self._pos + take]
            self._pos += take
            got += take
        return out

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller on consecutive uniform pairs."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))
        theta = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
