"""Lazily evaluated time-dependent fields.

Every construction stage is expressed as a graph of ``TimeField`` nodes that
produce grid values at an arbitrary instant.  Time derivatives are either exact
(closed forms, constants, sums) or central finite differences on a lattice
``t + j h``; the lattice makes nested derivatives reuse cached evaluations.
Computed values are stored in one shared LRU cache bounded in bytes.
"""

from __future__ import annotations

import itertools
from collections import OrderedDict
from typing import Callable, Sequence

import numpy as np

from .spectral_core import RANKS, SpectralError, TimeSampledField, fd_weights

DEFAULT_FD_ORDER = 8
_ids = itertools.count()


class FieldCache:
    """Byte-bounded LRU store shared by all nodes."""

    def __init__(self, max_bytes: int = 1_500_000_000):
        self.max_bytes = int(max_bytes)
        self._store: OrderedDict = OrderedDict()
        self._bytes = 0
        self.hits = 0
        self.misses = 0

    def get(self, key):
        try:
            val = self._store[key]
        except KeyError:
            self.misses += 1
            return None
        self._store.move_to_end(key)
        self.hits += 1
        return val

    def put(self, key, value):
        if key in self._store:
            return
        size = getattr(value, "nbytes", 64)
        if size > self.max_bytes:
            return
        self._store[key] = value
        self._bytes += size
        while self._bytes > self.max_bytes and self._store:
            _, old = self._store.popitem(last=False)
            self._bytes -= getattr(old, "nbytes", 64)

    def clear(self):
        self._store.clear()
        self._bytes = 0

    @property
    def nbytes(self) -> int:
        return self._bytes


CACHE = FieldCache()


def set_cache_budget(max_bytes: int):
    CACHE.max_bytes = int(max_bytes)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.flags.writeable = False
    return a


class TimeField:
    """Base node: a field of fixed rank and resolution depending on time."""

    rank: str
    N: int
    is_zero: bool = False

    def __init__(self, rank: str, N: int, name: str = ""):
        if rank not in RANKS:
            raise SpectralError(f"unknown rank {rank!r}")
        self.rank = rank
        self.N = int(N)
        self.name = name or type(self).__name__
        self._id = next(_ids)

    @property
    def shape(self) -> tuple:
        return (RANKS[self.rank], self.N, self.N, self.N)

    def value(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def deriv(self, t: float, k: int = 1) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t: float) -> np.ndarray:
        return self.value(t)

    def __add__(self, other: "TimeField") -> "TimeField":
        return SumField([(1.0, self), (1.0, other)])

    def __sub__(self, other: "TimeField") -> "TimeField":
        return SumField([(1.0, self), (-1.0, other)])

    def __neg__(self) -> "TimeField":
        return SumField([(-1.0, self)])

    def scaled(self, c: float) -> "TimeField":
        return SumField([(float(c), self)])


class ZeroField(TimeField):
    is_zero = True

    def value(self, t):
        return _frozen(np.zeros(self.shape))

    def deriv(self, t, k=1):
        return _frozen(np.zeros(self.shape))


class ConstantField(TimeField):
    """Time-independent values."""

    def __init__(self, rank: str, values: np.ndarray, name: str = ""):
        values = np.asarray(values, dtype=float).reshape((RANKS[rank],) + values.shape[-3:])
        super().__init__(rank, values.shape[-1], name)
        self._values = _frozen(values.copy())
        self.is_zero = not np.any(self._values)

    def value(self, t):
        return self._values

    def deriv(self, t, k=1):
        return _frozen(np.zeros(self.shape))


class ClosedFormField(TimeField):
    """Values and exact time derivatives from ``func(t, order) -> [f, f', ..., f^(order)]``."""

    def __init__(self, rank: str, N: int, func: Callable, quantum: float = 1e-12, name: str = ""):
        super().__init__(rank, N, name)
        self._func = func
        self._quantum = quantum

    def _jet(self, t: float, k: int):
        key = (self._id, "jet", round(t / self._quantum), k)
        hit = CACHE.get(key)
        if hit is not None:
            return hit
        out = self._func(t, k)
        out = _frozen(np.stack([np.asarray(o, dtype=float).reshape(self.shape) for o in out]))
        CACHE.put(key, out)
        return out

    def value(self, t):
        return self._jet(t, 0)[0]

    def deriv(self, t, k=1):
        return self._jet(t, k)[k]


class ComputedField(TimeField):
    """Values from ``func(t)``; derivatives by central differences with step ``step``."""

    def __init__(self, rank: str, N: int, func: Callable, step: float, fd_order: int = DEFAULT_FD_ORDER, name: str = ""):
        super().__init__(rank, N, name)
        if step <= 0:
            raise SpectralError("finite-difference step must be positive")
        self._func = func
        self.step = float(step)
        self.fd_order = int(fd_order)

    def _key(self, t: float):
        return (self._id, round(t / self.step * 1e6))

    def value(self, t):
        key = self._key(t)
        hit = CACHE.get(key)
        if hit is not None:
            return hit
        val = _frozen(np.asarray(self._func(t), dtype=float).reshape(self.shape))
        CACHE.put(key, val)
        return val

    def deriv(self, t, k=1):
        if k == 0:
            return self.value(t)
        half = (self.fd_order + k - 1) // 2
        offsets = np.arange(-half, half + 1, dtype=float)
        w = fd_weights(offsets, k) / self.step**k
        out = np.zeros(self.shape)
        for c, j in zip(w, offsets):
            if c != 0.0:
                out += c * self.value(t + j * self.step)
        return _frozen(out)


class SumField(TimeField):
    """Linear combination with constant coefficients; derivatives propagate exactly."""

    def __init__(self, terms: Sequence[tuple[float, TimeField]], name: str = ""):
        terms = [(float(c), f) for c, f in terms if not f.is_zero and c != 0.0]
        if not terms:
            raise SpectralError("empty sum; use ZeroField")
        super().__init__(terms[0][1].rank, terms[0][1].N, name)
        for _, f in terms:
            if f.rank != self.rank or f.N != self.N:
                raise SpectralError("summands differ in rank or resolution")
        self.terms = terms

    def value(self, t):
        out = np.zeros(self.shape)
        for c, f in self.terms:
            out += c * f.value(t)
        return _frozen(out)

    def deriv(self, t, k=1):
        out = np.zeros(self.shape)
        for c, f in self.terms:
            out += c * f.deriv(t, k)
        return _frozen(out)


def linear_combination(terms: Sequence[tuple[float, TimeField]], rank: str, N: int) -> TimeField:
    """``SumField`` that degrades gracefully to ``ZeroField`` when every term vanishes."""
    live = [(c, f) for c, f in terms if not f.is_zero and c != 0.0]
    if not live:
        return ZeroField(rank, N)
    return SumField(live)


class SampledField(TimeField):
    """Wrap a ``TimeSampledField`` (Lagrange interpolation in time)."""

    def __init__(self, sampled: TimeSampledField, name: str = ""):
        super().__init__(sampled.rank, sampled.N, name)
        self.sampled = sampled

    def value(self, t):
        return _frozen(self.sampled.at(t))

    def deriv(self, t, k=1):
        return _frozen(self.sampled.at(t, k))


def sample(field: TimeField, times: Sequence[float], order: int = 5) -> TimeSampledField:
    """Evaluate a lazy field on a time grid."""
    times = np.asarray(times, dtype=float)
    frames = np.stack([np.array(field.value(t)) for t in times])
    return TimeSampledField(field.rank, times, frames, order)


class MappedField(TimeField):
    """``op(f)`` for a time-independent linear operator ``op``; derivatives commute with it."""

    def __init__(self, op: Callable[[np.ndarray], np.ndarray], source: TimeField, rank: str | None = None, name: str = ""):
        super().__init__(rank or source.rank, source.N, name)
        self._op = op
        self.source = source
        self.is_zero = source.is_zero

    def value(self, t):
        if self.is_zero:
            return _frozen(np.zeros(self.shape))
        key = (self._id, "v", float(t))
        hit = CACHE.get(key)
        if hit is not None:
            return hit
        out = _frozen(np.asarray(self._op(np.array(self.source.value(t))), dtype=float).reshape(self.shape))
        CACHE.put(key, out)
        return out

    def deriv(self, t, k=1):
        if self.is_zero:
            return _frozen(np.zeros(self.shape))
        if k == 0:
            return self.value(t)
        return _frozen(np.asarray(self._op(np.array(self.source.deriv(t, k))), dtype=float).reshape(self.shape))


def chebyshev_nodes(t0: float, t1: float, n: int) -> np.ndarray:
    """``n`` Chebyshev points of the first kind on ``[t0, t1]``, increasing."""
    j = np.arange(n)
    x = -np.cos((2 * j + 1) * np.pi / (2 * n))
    return 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * x


class ChebyshevField(TimeField):
    """Global polynomial interpolant of frames given at Chebyshev nodes.

    Unlike piecewise interpolation the result is smooth in time, so finite
    differences of products obey the product rule to the lattice order.
    """

    def __init__(self, rank: str, interval: tuple, frames: np.ndarray, name: str = ""):
        frames = np.asarray(frames, dtype=float)
        super().__init__(rank, frames.shape[-1], name)
        self.interval = (float(interval[0]), float(interval[1]))
        n = frames.shape[0]
        # Chebyshev coefficients by the discrete cosine sum on first-kind nodes
        j = np.arange(n)
        theta = np.pi * (2 * j + 1) / (2 * n)
        T = np.cos(np.outer(np.arange(n), theta[::-1]))
        coef = (2.0 / n) * np.tensordot(T, frames, axes=(1, 0))
        coef[0] *= 0.5
        self.coef = coef
        self.is_zero = not np.any(frames)

    @classmethod
    def from_function(cls, rank: str, N: int, func: Callable, interval: tuple, n: int, name: str = "") -> "ChebyshevField":
        nodes = chebyshev_nodes(interval[0], interval[1], n)
        frames = np.stack([np.asarray(func(t), dtype=float).reshape((RANKS[rank], N, N, N)) for t in nodes])
        return cls(rank, interval, frames, name)

    def _x(self, t):
        t0, t1 = self.interval
        span = t1 - t0
        if t < t0 - 1e-9 * span or t > t1 + 1e-9 * span:
            raise SpectralError(f"time {t} outside interpolation interval [{t0}, {t1}]")
        return (2.0 * t - t0 - t1) / span, 2.0 / span

    def _eval(self, t, k):
        x, scale = self._x(t)
        c = self.coef
        if k:
            c = np.polynomial.chebyshev.chebder(c, m=k, axis=0) * scale**k
            if c.shape[0] == 0:
                return np.zeros(self.shape)
        n = c.shape[0]
        Tn = np.polynomial.chebyshev.chebvander(np.array([x]), n - 1)[0]
        return np.tensordot(Tn, c, axes=(0, 0))

    def value(self, t):
        return _frozen(self._eval(t, 0))

    def deriv(self, t, k=1):
        return _frozen(self._eval(t, k))
