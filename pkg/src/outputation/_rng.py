"""Counter-style pseudo-random streams for reproducible subsampling.

Every (master seed, outputation number, cluster index) triple maps to its
own SplitMix64 stream, so draws are identical for identical inputs no
matter how work is split across workers or platforms.  numpy's uint64
arithmetic wraps, which is exactly what SplitMix64 needs.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
# odd multipliers used when folding words into a stream seed
_FOLD1 = np.uint64(0xA24BAED4963EE407)
_FOLD2 = np.uint64(0x9FB21C651E98DF25)
_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _finalize(z):
    """SplitMix64 avalanche; ``z`` is a uint64 scalar or array."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def stream_seeds(master_seed: int, k: int, n_streams: int, salt: int = 0) -> np.ndarray:
    """Initial SplitMix64 states for ``n_streams`` per-cluster streams.

    ``salt`` distinguishes derived stream families (e.g. the retry stream
    after a failed fit) without touching the primary ones.
    """
    with np.errstate(over="ignore"):
        h = _finalize(np.uint64(master_seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        h = _finalize(h ^ (np.uint64(k) * _FOLD1) ^ _GOLDEN)
        h = _finalize(h ^ (np.uint64(salt) * _FOLD2))
        idx = np.arange(n_streams, dtype=np.uint64)
        return _finalize(h ^ (idx * _FOLD1) ^ _GOLDEN)


def derive_seed(*words: int) -> int:
    """Fold integer words into one 64-bit seed (order-sensitive)."""
    with np.errstate(over="ignore"):
        h = _finalize(_GOLDEN)
        for w in words:
            h = _finalize(h ^ (np.uint64(int(w) & 0xFFFFFFFFFFFFFFFF) * _FOLD1) ^ _GOLDEN)
    return int(h)


def sample_without_replacement(states: np.ndarray, n_take: int, n_total: int) -> np.ndarray:
    """Draw a sorted ``n_take``-subset of ``range(n_total)`` per stream.

    Partial Fisher-Yates run in lockstep across all streams; ``states``
    is consumed (advanced in place).  Returns an int64 array of shape
    ``(len(states), n_take)`` with each row sorted ascending.
    """
    c = states.shape[0]
    pool = np.tile(np.arange(n_total, dtype=np.int64), (c, 1))
    rows = np.arange(c)
    with np.errstate(over="ignore"):
        for t in range(n_take):
            states += _GOLDEN
            r = _finalize(states) % np.uint64(n_total - t)
            j = t + r.astype(np.int64)
            held = pool[rows, t].copy()
            pool[rows, t] = pool[rows, j]
            pool[rows, j] = held
    out = pool[:, :n_take].copy()
    out.sort(axis=1)
    return out
