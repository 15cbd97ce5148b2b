"""Deterministic random streams built on the splitmix64 mixing function.

Every random quantity in this package (synthetic data, parameter init,
batch shuffles, noise features) is drawn from a keyed counter stream:

    output_i(key) = mix64((key + (i + 1) * 0x9E3779B97F4A7C15) mod 2^64)

where ``mix64`` is the splitmix64 finalizer.  Uniforms take the top 53
bits, normals use the Box-Muller transform, and permutations sort indices
by fresh 64-bit keys.  Child streams are keyed by their parent's raw
outputs, so a single integer seed fixes every draw bit-for-bit.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64

# Stream indices used when deriving child keys from a top-level seed.
STREAM_CLASS_DIRECTIONS = 0
STREAM_SIGNAL = 1
STREAM_DISTRACTOR = 2
STREAM_NOISE = 3
STREAM_LABELS = 4
STREAM_MIXING = 5
STREAM_SPLITS = 6
STREAM_PARAM_INIT = 7
STREAM_BATCH_ORDER = 8
STREAM_NOISE_APPEND = 9


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


class Stream:
    """A counter-based splitmix64 stream with a fixed 64-bit key."""

    def __init__(self, key: int):
        self.key = _U64(int(key) & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def raw(self, n: int) -> np.ndarray:
        """Next `n` raw 64-bit outputs."""
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix(self.key + (idx + _U64(1)) * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """`n` doubles in [0, 1), 53-bit resolution."""
        return (self.raw(n) >> _U64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """`n` standard normals via Box-Muller on consecutive pairs."""
        pairs = (n + 1) // 2
        bits = self.raw(2 * pairs) >> _U64(11)
        # +0.5 keeps the radial uniform strictly inside (0, 1) so the log
        # is finite for every possible 53-bit pattern.
        u1 = (bits[:pairs].astype(np.float64) + 0.5) * 2.0**-53
        u2 = bits[pairs:].astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return out[:n]

    def normal_matrix(self, rows: int, cols: int) -> np.ndarray:
        return self.normal(rows * cols).reshape(rows, cols)

    def permutation(self, n: int) -> np.ndarray:
        """Permutation of range(n): indices sorted by fresh 64-bit keys."""
        return np.argsort(self.raw(n), kind="stable").astype(np.int64)

    def child(self, index: int) -> "Stream":
        """Stream keyed by this stream's `index`-th raw output (counter untouched)."""
        idx = _U64(int(index) & 0xFFFFFFFFFFFFFFFF)
        with np.errstate(over="ignore"):
            key = _mix(self.key + (idx + _U64(1)) * _GOLDEN)
        return Stream(int(key))


def stream(seed: int, stream_id: int) -> Stream:
    """Child stream `stream_id` of the top-level `seed`."""
    return Stream(seed).child(stream_id)
