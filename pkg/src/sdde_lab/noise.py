"""Reproducible Brownian driving noise.

Every Monte Carlo path owns a :class:`NoiseStream` keyed by
``(master_seed, path_index)``.  The key is mixed with SplitMix64 (a bijection
on 64-bit words) into the 128-bit key of a Philox4x64 counter-based generator,
so distinct pairs never share a key and paths can be generated in any order.

A :class:`FinePath` samples ``W`` on a uniform reference grid and refines it
at arbitrary times by Brownian-bridge conditioning, which lets a fixed-step
reference solution and an adaptive solution share one Wiener path.
"""

from __future__ import annotations

import bisect
import math

import numpy as np

from .errors import DomainError

__all__ = ["splitmix64", "stream_key", "NoiseStream", "FinePath",
           "gaussian_increment", "bridge_sample", "increment_between"]

_MASK = (1 << 64) - 1


def splitmix64(z: int) -> int:
    """SplitMix64 output function applied to `z` (mod 2^64)."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_key(master_seed: int, path_index: int) -> tuple[int, int]:
    """128-bit Philox key for one path: ``(mix(seed), mix(path_index))``."""
    return splitmix64(master_seed & _MASK), splitmix64(path_index & _MASK)


class NoiseStream:
    """Standard-normal stream for one path.

    Normals are drawn from the generator in fixed-size chunks and handed out
    sequentially, so the value sequence does not depend on how callers batch
    their requests.  The compiled engine consumes :attr:`buffer` directly.
    """

    chunk = 1 << 14

    def __init__(self, master_seed: int, path_index: int = 0, noise_dim: int = 1):
        if noise_dim < 1:
            raise ValueError("noise_dim must be positive")
        self.master_seed = int(master_seed)
        self.path_index = int(path_index)
        self.noise_dim = int(noise_dim)
        k0, k1 = stream_key(self.master_seed, self.path_index)
        self._gen = np.random.Generator(np.random.Philox(key=np.array([k0, k1], dtype=np.uint64)))
        self.buffer = np.empty(0)
        self.pos = 0

    def refill(self, need: int = 1) -> None:
        """Guarantee at least `need` unconsumed normals in :attr:`buffer`."""
        avail = len(self.buffer) - self.pos
        if avail >= need:
            return
        n_new = max(self.chunk, need - avail)
        n_new = -(-n_new // self.chunk) * self.chunk
        self.buffer = np.concatenate([self.buffer[self.pos:], self._gen.standard_normal(n_new)])
        self.pos = 0

    def normals(self, n: int) -> np.ndarray:
        self.refill(n)
        out = self.buffer[self.pos:self.pos + n]
        self.pos += n
        return out.copy()

    def increment(self, a: float, b: float) -> np.ndarray:
        """Forward increment over ``[a, b]``; only the length ``b - a`` matters."""
        return gaussian_increment(self, b - a)


def gaussian_increment(stream: NoiseStream, dt: float) -> np.ndarray:
    """Draw from ``N(0, dt I_d)``; ``dt == 0`` returns zeros without drawing."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if dt == 0:
        return np.zeros(stream.noise_dim)
    return math.sqrt(dt) * stream.normals(stream.noise_dim)


class FinePath:
    """Wiener path on ``0 = s_0 < ... < s_M = T`` with bridge refinement.

    Parameters
    ----------
    horizon : float
        End time ``T``; must be an integer multiple of `dt_ref` (1e-9 rel.).
    dt_ref : float
        Grid spacing.
    stream : NoiseStream
        Supplies the grid increments, then the bridge samples.
    """

    def __init__(self, horizon: float, dt_ref: float, stream: NoiseStream):
        n = horizon / dt_ref
        n_int = int(round(n))
        if n_int < 1 or abs(n - n_int) > 1e-9 * n:
            raise ValueError("horizon must be a positive integer multiple of dt_ref")
        self.dt_ref = float(dt_ref)
        self.n_cells = n_int
        self.grid = np.arange(n_int + 1, dtype=np.float64) * self.dt_ref
        self.horizon = float(self.grid[-1])
        self.noise_dim = stream.noise_dim
        self.stream = stream
        d = stream.noise_dim
        incr = math.sqrt(self.dt_ref) * stream.normals(n_int * d).reshape(n_int, d)
        self.values = np.zeros((n_int + 1, d))
        np.cumsum(incr, axis=0, out=self.values[1:])
        # cell index -> (sorted interior times, matching values)
        self._cache: dict[int, tuple[list[float], list[np.ndarray]]] = {}

    def grid_increments(self, stop: int | None = None) -> np.ndarray:
        """``W(s_{j+1}) - W(s_j)`` for the first `stop` cells."""
        return np.diff(self.values[: None if stop is None else stop + 1], axis=0)

    def cached_points(self, cell: int) -> list[float]:
        return list(self._cache.get(cell, ([], []))[0])

    def value(self, s: float, stream: NoiseStream | None = None) -> np.ndarray:
        return bridge_sample(self, self.stream if stream is None else stream, s)

    def increment(self, a: float, b: float) -> np.ndarray:
        return increment_between(self, self.stream, a, b)


def bridge_sample(path: FinePath, stream: NoiseStream, s: float) -> np.ndarray:
    """Return ``W_s``, sampling it from the bridge between its known neighbours.

    New points are cached, so repeated queries return identical values and
    later queries are conditioned on earlier ones.
    """
    if not (0.0 <= s <= path.horizon):
        raise DomainError(f"time {s} outside [0, {path.horizon}]")
    j = int(np.searchsorted(path.grid, s, side="right")) - 1
    if path.grid[j] == s:
        return path.values[j].copy()
    times, vals = path._cache.setdefault(j, ([], []))
    k = bisect.bisect_left(times, s)
    if k < len(times) and times[k] == s:
        return vals[k].copy()
    a, wa = (times[k - 1], vals[k - 1]) if k > 0 else (path.grid[j], path.values[j])
    b, wb = (times[k], vals[k]) if k < len(times) else (path.grid[j + 1], path.values[j + 1])
    frac = (s - a) / (b - a)
    sd = math.sqrt((s - a) * (b - s) / (b - a))
    w = wa + frac * (wb - wa) + sd * stream.normals(path.noise_dim)
    times.insert(k, s)
    vals.insert(k, w)
    return w.copy()


def increment_between(path: FinePath, stream: NoiseStream, a: float, b: float) -> np.ndarray:
    """``W_b - W_a`` on the shared path (zero when ``a == b``)."""
    if a > b:
        raise DomainError("need a <= b")
    wa = bridge_sample(path, stream, a)
    if a == b:
        return np.zeros_like(wa)
    return bridge_sample(path, stream, b) - wa
