"""Dense numeric kernels: stable log-domain helpers and a seeded generator.

All training math runs in double precision; only the on-disk feature format
is float32. Log-domain values use -inf for probability zero, never NaN, so
impossible states propagate cleanly through the dynamic programs.
"""

import math

import numpy as np

from .errors import NumericError, UsageError

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_NEG53 = 2.0 ** -53


def _mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int (exact 64-bit arithmetic)."""
    z = (z ^ (z >> 30)) * _MIX1 & _MASK64
    z = (z ^ (z >> 27)) * _MIX2 & _MASK64
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 stream generator, frozen as the project-wide RNG.

    The generator is counter-based: output k is a bit-mix of
    seed + (k+1)*gamma, so a block of any size can be produced with
    vectorized uint64 arithmetic while scalar draws use exact Python ints.
    Identical seeds produce identical 64-bit streams on every platform;
    derived doubles are exact arithmetic on those bits. The same algorithm
    is used for parameter init, corpus synthesis, and shuffling.

    Instances are single-owner: never share one across threads.
    """

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix64(self._state)

    def _block_u64(self, n: int) -> np.ndarray:
        """n raw outputs as uint64, advancing the state by n steps."""
        counters = np.uint64(self._state) + np.uint64(_GAMMA) * np.arange(
            1, n + 1, dtype=np.uint64
        )
        self._state = (self._state + _GAMMA * n) & _MASK64
        z = counters
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, lo: float, hi: float, size) -> np.ndarray:
        """Array of doubles in [lo, hi), from the top 53 bits of each output."""
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise UsageError("uniform bounds must be finite")
        if lo >= hi:
            raise UsageError(f"uniform requires lo < hi, got [{lo}, {hi})")
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self._block_u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG53
        return (lo + (hi - lo) * u).reshape(shape)

    def normal(self, stddev: float, size) -> np.ndarray:
        """Zero-mean Gaussian draws via Box-Muller on uniform pairs."""
        if stddev < 0:
            raise UsageError("normal requires stddev >= 0")
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        raw = self._block_u64(2 * pairs)
        # u1 in (0, 1] so log never sees zero; u2 in [0, 1)
        u1 = ((raw[:pairs] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _TWO_NEG53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * _TWO_NEG53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:n]
        return (stddev * z).reshape(shape)

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise UsageError("randint requires n > 0")
        limit = ((1 << 64) // n) * n
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]


def uniform_fill(rng: Rng, shape, lo: float, hi: float) -> np.ndarray:
    """Dense matrix of uniform draws in [lo, hi); deterministic given the seed."""
    return rng.uniform(lo, hi, shape)


def log_sum_exp(values) -> float:
    """ln sum(exp(v_i)) without overflow; -inf iff every entry is -inf."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise UsageError("log_sum_exp needs a non-empty 1-d sequence")
    if np.isnan(arr).any() or np.isposinf(arr).any():
        raise UsageError("log_sum_exp entries must be real or -inf")
    m = arr.max()
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.exp(arr - m).sum()))


def softmax(row) -> np.ndarray:
    """Probability vector from a row of scores; shift-invariant and stable."""
    arr = np.asarray(row, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NumericError("softmax input must be finite")
    e = np.exp(arr - arr.max())
    return e / e.sum()


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-d score matrix."""
    if not np.isfinite(scores).all():
        raise NumericError("softmax input must be finite")
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax; never returns -inf for finite inputs."""
    if not np.isfinite(scores).all():
        raise NumericError("log_softmax input must be finite")
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
