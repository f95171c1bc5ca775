"""Small numeric kernels shared by the rest of the package.

Everything here works on float64 numpy arrays.  The random stream is a
counter-based splitmix64 generator with Box-Muller normals so that a seed
produces the same numbers regardless of numpy version or platform.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "MOE_REBASIN_THREADS"

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def stable_softmax(z) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] == 0:
        raise ValueError("empty softmax")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def trapezoid_integral(ts, ys) -> float:
    """Trapezoid rule over a strictly increasing grid running from 0 to 1."""
    ts = np.asarray(ts, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if ts.ndim != 1 or ts.shape != ys.shape or len(ts) < 2:
        raise ValueError("grid and values must be 1-d sequences of equal length >= 2")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("grid is not strictly increasing")
    if ts[0] != 0.0 or ts[-1] != 1.0:
        raise ValueError("grid must start at 0 and end at 1")
    return float(np.sum(np.diff(ts) * (ys[1:] + ys[:-1]) * 0.5))


def uniform_grid(points: int = 25) -> np.ndarray:
    if points < 2:
        raise ValueError(f"grid needs at least 2 points, got {points}")
    ts = np.linspace(0.0, 1.0, points)
    ts[-1] = 1.0
    return ts


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return a


def _splitmix_mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int) -> int:
    """One splitmix64 output for state ``seed`` (used to derive child seeds)."""
    state = np.array([(seed + 0x9E3779B97F4A7C15) & _MASK64], dtype=np.uint64)
    return int(_splitmix_mix(state)[0])


class RngStream:
    """Counter-based splitmix64 stream.

    The i-th raw word is ``mix(seed + (i + 1) * GAMMA)``, i.e. exactly the
    sequence produced by the reference sequential splitmix64 generator.
    Uniforms take the top 53 bits.  Normals use Box-Muller on consecutive
    word pairs (u1, u2) and emit ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)``
    with ``r = sqrt(-2 ln(1 - u1))``; an odd request discards the spare.
    Single-owner: not safe to share between threads.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def next_u64(self, size: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(self.counter + 1, self.counter + 1 + size, dtype=np.uint64)
            states = np.uint64(self.seed) + steps * _GAMMA
            out = _splitmix_mix(states)
        self.counter += size
        return out

    def uniform(self, size: int | tuple = 1) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        words = self.next_u64(count)
        return ((words >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def normal(self, size: int | tuple = 1) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1).reshape(-1)
        return z[:count].reshape(shape)

    def integers(self, high: int, size: int) -> np.ndarray:
        """Integers in [0, high) by scaling 53-bit uniforms."""
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n), drawing from the back."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def child(self, key: int) -> "RngStream":
        """Independent stream derived from this seed and an integer key."""
        return RngStream(splitmix64(self.seed ^ splitmix64(key)))


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    return max(1, value)


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Order-preserving map over a thread pool capped by MOE_REBASIN_THREADS."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def naive_matmul(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]]) -> list[list[float]]:
    """Triple-loop product, kept as an oracle for the vectorised paths."""
    rows, inner, cols = len(a), len(b), len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += a[i][k] * b[k][j]
            out[i][j] = acc
    return out
