"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream, counter)`` obtained by
pushing the counter through the SplitMix64 finalizer, so pixels can be
sampled in any order (or in parallel) and still reproduce bit-for-bit.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri, pdtr

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def uint64_stream(seed: int, counters, stream: int = 0) -> np.ndarray:
    """64-bit hashes of ``counters`` under key ``(seed, stream)``."""
    ctr = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = np.array([int(seed) & _MASK64], dtype=np.uint64)
        key = _mix64(key + np.array([stream & _MASK64], dtype=np.uint64) * _GOLDEN)
        return _mix64(_mix64(key + (ctr + np.uint64(1)) * _GOLDEN) ^ key)


def uniform(seed: int, counters, stream: int = 0) -> np.ndarray:
    """Uniform doubles strictly inside (0, 1), 53 bits of resolution."""
    bits = uint64_stream(seed, counters, stream) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * 2.0 ** -53


def _invert_walk(lm: np.ndarray, um: np.ndarray) -> np.ndarray:
    z = ndtri(um)
    k = np.maximum(np.floor(lm + np.sqrt(lm) * z + (z * z - 1.0) / 6.0 + 0.5), 0.0)

    idx = np.flatnonzero(pdtr(k, lm) < um)
    while idx.size:
        k[idx] += 1.0
        idx = idx[pdtr(k[idx], lm[idx]) < um[idx]]
    idx = np.flatnonzero(k > 0)
    idx = idx[pdtr(k[idx] - 1.0, lm[idx]) >= um[idx]]
    while idx.size:
        k[idx] -= 1.0
        idx = idx[k[idx] > 0]
        idx = idx[pdtr(k[idx] - 1.0, lm[idx]) >= um[idx]]
    return k


def _invert_table(lam: float, u: np.ndarray) -> np.ndarray:
    # same pdtr values as the walk, tabulated once for a shared mean
    top = max(16.0, lam + 12.0 * np.sqrt(lam) + 12.0)
    umax = float(u.max())
    while True:
        cdf = pdtr(np.arange(np.ceil(top) + 1.0), lam)
        if cdf[-1] >= umax:
            break
        top *= 2.0
    return np.searchsorted(cdf, u, side="left").astype(np.float64)


def poisson_from_uniform(lam: np.ndarray, u: np.ndarray, shared_min: int = 256) -> np.ndarray:
    """Exact Poisson quantiles ``min{k : P(X <= k) >= u}`` by CDF inversion.

    Means shared by at least ``shared_min`` entries (a flat background, say)
    are inverted through a tabulated CDF.  The rest start from a
    Cornish-Fisher estimate and walk to the exact quantile with the
    regularized incomplete gamma CDF, usually in a step or two.  Both routes
    evaluate the same CDF, so the result does not depend on ``shared_min``.
    """
    lam = np.asarray(lam, dtype=np.float64)
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), lam.shape)
    out = np.zeros(lam.shape, dtype=np.float64)
    active = np.flatnonzero(lam > 0)
    if not active.size:
        return out
    lm = lam.ravel()[active]
    um = u.ravel()[active]
    k = np.empty_like(lm)
    values, inverse, counts = np.unique(lm, return_inverse=True, return_counts=True)
    shared = counts >= shared_min
    walk = ~shared[inverse]
    if walk.any():
        k[walk] = _invert_walk(lm[walk], um[walk])
    if shared.any():
        order = np.argsort(inverse, kind="stable")
        bounds = np.concatenate(([0], np.cumsum(counts)))
        for g in np.flatnonzero(shared):
            members = order[bounds[g]:bounds[g + 1]]
            k[members] = _invert_table(float(values[g]), um[members])
    out.ravel()[active] = k
    return out


def poisson_field(lam: np.ndarray, seed: int, stream: int = 0) -> np.ndarray:
    """Per-pixel Poisson draws keyed by ``(seed, flat pixel index)``."""
    lam = np.asarray(lam, dtype=np.float64)
    u = uniform(seed, np.arange(lam.size, dtype=np.uint64), stream).reshape(lam.shape)
    return poisson_from_uniform(lam, u)
