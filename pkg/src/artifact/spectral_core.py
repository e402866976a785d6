"""Periodic fields on the 3-torus: transforms, derivatives, products and norms.

Every field lives on the uniform grid ``x_j = 2*pi*j/N`` of ``[0, 2*pi)^3``.
Values are stored as arrays of shape ``(ncomp, N, N, N)`` where ``ncomp`` is
1 (scalar), 3 (vector) or 6 (symmetric tensor, components ordered as
``TENSOR_PAIRS``).  Nonlinear products are de-aliased by truncation: the
inputs are assumed band-limited and the pointwise
product is truncated back to that band, which makes the retained modes exact.

The retained band is ``|k_i| <= (N - 1) // 4`` rather than the usual 2/3 rule
so that products of up to three band-limited factors (for instance
``rho u (x) u``) are exact on the retained modes when evaluated pointwise and
truncated once.  Binary products may additionally be differentiated before the
final truncation without aliasing.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
import scipy.fft as sfft

RANKS = {"scalar": 1, "vector": 3, "symmetric_tensor": 6}
TENSOR_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
# position of (i, j) in the 6-component storage
PAIR_INDEX = np.array([[0, 3, 4], [3, 1, 5], [4, 5, 2]])
MAX_DERIVATIVE_ORDER = 16
# highest product degree that stays exact after a single truncation
PRODUCT_DEGREE = 3


def band_limit(N: int) -> int:
    """Largest retained wavenumber per axis on an ``N^3`` grid."""
    return (N - 1) // (PRODUCT_DEGREE + 1)


class SpectralError(ValueError):
    """Raised when a spectral operation is called outside its domain."""


@dataclass(frozen=True)
class SpectralGrid:
    """Wavenumbers and masks for an ``N^3`` periodic grid."""

    N: int

    def __post_init__(self):
        if self.N < 4 or self.N % 2:
            raise SpectralError(f"grid size must be even and >= 4, got {self.N}")

    @property
    def band(self) -> int:
        """Largest retained wavenumber per axis."""
        return band_limit(self.N)

    @property
    def spacing(self) -> float:
        return 2.0 * np.pi / self.N

    @property
    def fourier_shape(self) -> tuple[int, int, int]:
        return (self.N, self.N, self.N // 2 + 1)


@lru_cache(maxsize=8)
def _wavenumbers(N: int):
    k_full = np.fft.fftfreq(N, 1.0 / N)
    k_half = np.fft.rfftfreq(N, 1.0 / N)
    k1 = k_full[:, None, None]
    k2 = k_full[None, :, None]
    k3 = k_half[None, None, :]
    ks = (k1, k2, k3)
    ksq = k1**2 + k2**2 + k3**2
    band = band_limit(N)
    mask = (np.abs(k1) <= band) & (np.abs(k2) <= band) & (np.abs(k3) <= band)
    # rfft weights: interior half-plane modes count twice in Parseval sums
    weight = np.full(N // 2 + 1, 2.0)
    weight[0] = 1.0
    if N % 2 == 0:
        weight[-1] = 1.0
    return ks, ksq, mask, weight[None, None, :]


def wavenumbers(N: int):
    """Return ``(k1, k2, k3)`` broadcastable integer-valued wavenumber arrays."""
    return _wavenumbers(N)[0]


def wavenumber_sq(N: int) -> np.ndarray:
    return _wavenumbers(N)[1]


def band_mask(N: int) -> np.ndarray:
    return _wavenumbers(N)[2]


@lru_cache(maxsize=8)
def grid_coordinates(N: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = 2.0 * np.pi * np.arange(N) / N
    return x[:, None, None], x[None, :, None], x[None, None, :]


def grid_points(N: int) -> np.ndarray:
    """Full coordinate array of shape ``(3, N, N, N)``."""
    x1, x2, x3 = grid_coordinates(N)
    return np.stack(np.broadcast_arrays(x1, x2, x3))


def to_fourier(values: np.ndarray) -> np.ndarray:
    """Real FFT over the last three axes."""
    return sfft.rfftn(values, axes=(-3, -2, -1))


def to_grid(coeffs: np.ndarray, N: int) -> np.ndarray:
    return sfft.irfftn(coeffs, s=(N, N, N), axes=(-3, -2, -1))


def truncate(values: np.ndarray) -> np.ndarray:
    """Project grid values onto the retained band."""
    N = values.shape[-1]
    return to_grid(to_fourier(values) * band_mask(N), N)


def is_band_limited(values: np.ndarray, K: float | None = None, tol: float = 0.0) -> bool:
    """Check that no coefficient with ``max|k_i| > K`` exceeds ``tol`` times the peak."""
    N = values.shape[-1]
    K = band_limit(N) if K is None else K
    k1, k2, k3 = wavenumbers(N)
    outside = (np.abs(k1) > K) | (np.abs(k2) > K) | (np.abs(k3) > K)
    coeffs = np.abs(to_fourier(values))
    peak = coeffs.max() if coeffs.size else 0.0
    return bool(np.all(coeffs[..., outside] <= tol * max(peak, 1e-300)))


def product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """De-aliased pointwise product of band-limited grid arrays (broadcasting)."""
    return truncate(a * b)


def derivative_values(values: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
    """Spectral derivative ``d^alpha`` of grid values (any leading axes)."""
    alpha = tuple(int(a) for a in alpha)
    if any(a < 0 for a in alpha) or len(alpha) != 3:
        raise SpectralError(f"invalid multi-index {alpha}")
    order = sum(alpha)
    if order > MAX_DERIVATIVE_ORDER:
        raise SpectralError(f"derivative order {order} exceeds {MAX_DERIVATIVE_ORDER}")
    if order == 0:
        return np.array(values, copy=True)
    N = values.shape[-1]
    ks = wavenumbers(N)
    symbol = np.ones(1, dtype=complex)
    for k, a in zip(ks, alpha):
        if a:
            symbol = symbol * (1j * k) ** a
    symbol = _kill_nyquist(symbol, N, alpha)
    return to_grid(to_fourier(values) * symbol, N)


def _kill_nyquist(symbol: np.ndarray, N: int, alpha: Sequence[int]) -> np.ndarray:
    # odd derivatives of the Nyquist mode are not real-representable
    if not any(a % 2 for a in alpha):
        return symbol
    ks = wavenumbers(N)
    nyq = np.zeros(np.broadcast_shapes(*(k.shape for k in ks)), dtype=bool)
    for k, a in zip(ks, alpha):
        if a % 2:
            nyq = nyq | (np.abs(k) == N // 2)
    return np.where(nyq, 0.0, symbol)


def gradient_values(values: np.ndarray) -> np.ndarray:
    """Gradient of a scalar ``(1, N, N, N)`` or ``(N, N, N)`` array -> ``(3, N, N, N)``."""
    v = values.reshape(values.shape[-3:])
    N = v.shape[-1]
    hat = to_fourier(v)
    ks = wavenumbers(N)
    out = np.empty((3, N, N, N))
    for i, k in enumerate(ks):
        out[i] = to_grid(_kill_nyquist(1j * k, N, _unit(i)) * hat, N)
    return out


def divergence_values(values: np.ndarray) -> np.ndarray:
    """Divergence of a vector ``(3, N, N, N)`` -> scalar ``(N, N, N)``.

    For a symmetric tensor ``(6, N, N, N)`` returns the vector
    ``(div T)_i = d_j T_ij``.
    """
    N = values.shape[-1]
    ks = wavenumbers(N)
    hat = to_fourier(values)
    if values.shape[0] == 3:
        acc = sum(_kill_nyquist(1j * ks[j], N, _unit(j)) * hat[j] for j in range(3))
        return to_grid(acc, N)
    if values.shape[0] == 6:
        out = np.empty((3, N, N, N))
        for i in range(3):
            acc = sum(
                _kill_nyquist(1j * ks[j], N, _unit(j)) * hat[PAIR_INDEX[i, j]] for j in range(3)
            )
            out[i] = to_grid(acc, N)
        return out
    raise SpectralError(f"divergence needs 3 or 6 components, got {values.shape[0]}")


def curl_values(values: np.ndarray) -> np.ndarray:
    N = values.shape[-1]
    ks = wavenumbers(N)
    hat = to_fourier(values)
    d = [_kill_nyquist(1j * ks[j], N, _unit(j)) for j in range(3)]
    out = np.empty((3, N, N, N))
    out[0] = to_grid(d[1] * hat[2] - d[2] * hat[1], N)
    out[1] = to_grid(d[2] * hat[0] - d[0] * hat[2], N)
    out[2] = to_grid(d[0] * hat[1] - d[1] * hat[0], N)
    return out


def vector_gradient_values(values: np.ndarray) -> np.ndarray:
    """Jacobian ``J[i, j] = d_j v_i`` of a vector field, shape ``(3, 3, N, N, N)``."""
    N = values.shape[-1]
    ks = wavenumbers(N)
    hat = to_fourier(values)
    out = np.empty((3, 3, N, N, N))
    for j in range(3):
        dj = _kill_nyquist(1j * ks[j], N, _unit(j))
        for i in range(3):
            out[i, j] = to_grid(dj * hat[i], N)
    return out


def advect_values(u: np.ndarray, f: np.ndarray) -> np.ndarray:
    """De-aliased ``(u . grad) f`` for scalar, vector or tensor ``f`` (leading comp axis)."""
    N = f.shape[-1]
    comps = f.reshape((-1, N, N, N))
    out = np.zeros_like(comps)
    ks = wavenumbers(N)
    hat = to_fourier(comps)
    for j in range(3):
        dj = to_grid(_kill_nyquist(1j * ks[j], N, _unit(j)) * hat, N)
        out += u[j] * dj
    return truncate(out).reshape(f.shape)


def inverse_laplacian_values(values: np.ndarray) -> np.ndarray:
    """``Delta^{-1}`` on mean-zero data (the zero mode is dropped)."""
    N = values.shape[-1]
    ksq = wavenumber_sq(N)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(ksq > 0, -1.0 / ksq, 0.0)
    return to_grid(to_fourier(values) * inv, N)


def mean_values(values: np.ndarray) -> np.ndarray | float:
    m = values.mean(axis=(-3, -2, -1))
    return m


def _unit(i: int) -> tuple[int, int, int]:
    e = [0, 0, 0]
    e[i] = 1
    return tuple(e)


def sym_to_matrix(values: np.ndarray) -> np.ndarray:
    """Expand 6-component storage to a full ``(3, 3, ...)`` array."""
    return values[PAIR_INDEX]


def matrix_to_sym(matrix: np.ndarray, check: bool = False) -> np.ndarray:
    """Compress a ``(3, 3, ...)`` array to 6 components, symmetrizing off-diagonals."""
    if check and not np.allclose(matrix, np.swapaxes(matrix, 0, 1)):
        raise SpectralError("matrix is not symmetric")
    out = np.empty((6,) + matrix.shape[2:])
    for c, (i, j) in enumerate(TENSOR_PAIRS):
        out[c] = matrix[i, j] if i == j else 0.5 * (matrix[i, j] + matrix[j, i])
    return out


def outer_sym(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise symmetric part of ``a (x) b`` in 6-component storage (not truncated)."""
    out = np.empty((6,) + a.shape[1:])
    for c, (i, j) in enumerate(TENSOR_PAIRS):
        out[c] = a[i] * b[i] if i == j else 0.5 * (a[i] * b[j] + a[j] * b[i])
    return out


def outer_full(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise ``(a (x) b)_{ij} = a_i b_j`` as a ``(3, 3, ...)`` array."""
    return a[:, None] * b[None, :]


def div_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``div(a (x) b)_i = d_j (a_j b_i)`` with de-aliased products."""
    N = a.shape[-1]
    ks = wavenumbers(N)
    out = np.zeros((3, N, N, N))
    prods = to_fourier(a[:, None] * b[None, :]) * band_mask(N)
    for i in range(3):
        acc = sum(_kill_nyquist(1j * ks[j], N, _unit(j)) * prods[j, i] for j in range(3))
        out[i] = to_grid(acc, N)
    return out


@dataclass
class SpectralField:
    """Scalar, vector or symmetric-tensor samples on the ``N^3`` torus grid.

    Parameters
    ----------
    rank : {"scalar", "vector", "symmetric_tensor"}
    values : ndarray, shape ``(ncomp, N, N, N)``
    """

    rank: str
    values: np.ndarray
    _fourier: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.rank not in RANKS:
            raise SpectralError(f"unknown rank {self.rank!r}")
        v = np.asarray(self.values, dtype=float)
        ncomp = RANKS[self.rank]
        if v.ndim == 3 and ncomp == 1:
            v = v[None]
        if v.ndim != 4 or v.shape[0] != ncomp or len(set(v.shape[1:])) != 1:
            raise SpectralError(f"values of shape {v.shape} do not match rank {self.rank}")
        self.values = v
        SpectralGrid(v.shape[-1])

    @property
    def N(self) -> int:
        return self.values.shape[-1]

    @property
    def ncomp(self) -> int:
        return self.values.shape[0]

    @property
    def fourier(self) -> np.ndarray:
        if self._fourier is None:
            self._fourier = to_fourier(self.values)
        return self._fourier

    @classmethod
    def from_fourier(cls, rank: str, coeffs: np.ndarray, N: int) -> "SpectralField":
        return cls(rank, to_grid(coeffs, N), coeffs)

    @classmethod
    def zeros(cls, rank: str, N: int) -> "SpectralField":
        return cls(rank, np.zeros((RANKS[rank], N, N, N)))

    @classmethod
    def from_function(cls, rank: str, N: int, func) -> "SpectralField":
        """Sample ``func(x1, x2, x3)`` (returning a list of components) on the grid."""
        x1, x2, x3 = grid_coordinates(N)
        comps = func(x1, x2, x3)
        if rank == "scalar":
            comps = [comps]
        arr = np.stack([np.broadcast_to(c, (N, N, N)) for c in comps]).astype(float)
        return cls(rank, arr)

    def matrix(self) -> np.ndarray:
        """Full symmetric ``(3, 3, N, N, N)`` array (tensor fields only)."""
        if self.rank != "symmetric_tensor":
            raise SpectralError("matrix() needs a symmetric tensor")
        return sym_to_matrix(self.values)

    def band_limited(self, K: float | None = None, tol: float = 0.0) -> bool:
        return is_band_limited(self.values, K, tol)

    def truncated(self) -> "SpectralField":
        return SpectralField(self.rank, truncate(self.values))

    def _check(self, other: "SpectralField"):
        if self.rank != other.rank or self.N != other.N:
            raise SpectralError("rank or resolution mismatch")

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.rank, self.values + other.values)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.rank, self.values - other.values)

    def __mul__(self, c: float) -> "SpectralField":
        return SpectralField(self.rank, c * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.rank, -self.values)

    def sup(self) -> float:
        return float(np.abs(self.values).max())


def partial_derivative(f: SpectralField, alpha: Sequence[int]) -> SpectralField:
    """Exact Fourier-side derivative ``d^alpha f``."""
    out = derivative_values(f.values, alpha)
    return SpectralField(f.rank, out)


def mean(f: SpectralField) -> float | np.ndarray:
    """Spatial average (zeroth Fourier coefficient) per component."""
    m = f.values.mean(axis=(1, 2, 3))
    return float(m[0]) if f.rank == "scalar" else m


def multi_indices(order: int) -> Iterable[tuple[int, int, int]]:
    for a in itertools.product(range(order + 1), repeat=3):
        if sum(a) == order:
            yield a


def c_norm_values(values: np.ndarray, order: int) -> float:
    """Sup of all spatial derivatives of order ``<= order`` of a component stack."""
    if order > MAX_DERIVATIVE_ORDER:
        raise SpectralError(f"order {order} exceeds {MAX_DERIVATIVE_ORDER}")
    N = values.shape[-1]
    hat = to_fourier(values)
    ks = wavenumbers(N)
    best = float(np.abs(values).max()) if values.size else 0.0
    for n in range(1, order + 1):
        for alpha in multi_indices(n):
            symbol = np.ones(1, dtype=complex)
            for k, a in zip(ks, alpha):
                if a:
                    symbol = symbol * (1j * k) ** a
            symbol = _kill_nyquist(symbol, N, alpha)
            best = max(best, float(np.abs(to_grid(hat * symbol, N)).max()))
    return best


def c_norm(f, order: int) -> float:
    """``C^0_t C^N_x`` norm of a field or a time-sampled field."""
    if isinstance(f, SpectralField):
        return c_norm_values(f.values, order)
    return max(c_norm_values(frame, order) for frame in f.frames)


# ---------------------------------------------------------------------------
# Time-sampled fields


def fd_weights(offsets: Sequence[float], derivative: int = 1) -> np.ndarray:
    """Finite-difference weights at ``offsets`` (in units of the step) for ``d^n/dt^n`` at 0.

    Solves the Vandermonde moment system; exact for polynomials of degree
    ``len(offsets) - 1``.
    """
    s = np.asarray(offsets, dtype=float)
    n = len(s)
    A = np.vander(s, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[derivative] = float(np.prod(np.arange(1, derivative + 1)))
    return np.linalg.solve(A, rhs)


def central_offsets(order: int) -> np.ndarray:
    """Symmetric stencil offsets giving ``order``-accurate first derivatives."""
    if order < 2 or order % 2:
        raise SpectralError("central stencil order must be even and >= 2")
    half = order // 2
    return np.arange(-half, half + 1, dtype=float)


@dataclass
class TimeSampledField:
    """A field sampled at increasing instants, with local Lagrange interpolation.

    Parameters
    ----------
    rank : str
    times : ndarray, shape ``(nt,)``
    frames : ndarray, shape ``(nt, ncomp, N, N, N)``
    order : int
        Interpolation polynomial degree (at least 3).
    """

    rank: str
    times: np.ndarray
    frames: np.ndarray
    order: int = 5

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.frames = np.asarray(self.frames, dtype=float)
        if self.order < 3:
            raise SpectralError("interpolation order must be >= 3")
        if np.any(np.diff(self.times) <= 0):
            raise SpectralError("sample times must be strictly increasing")
        if self.frames.shape[0] != len(self.times):
            raise SpectralError("one frame per sample time is required")
        if self.frames.ndim != 5 or self.frames.shape[1] != RANKS[self.rank]:
            raise SpectralError("frames do not match the declared rank")

    @property
    def N(self) -> int:
        return self.frames.shape[-1]

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def frame(self, i: int) -> SpectralField:
        return SpectralField(self.rank, self.frames[i])

    def _stencil(self, t: float) -> np.ndarray:
        n = min(self.order + 1, len(self.times))
        i = int(np.searchsorted(self.times, t))
        lo = min(max(i - n // 2, 0), len(self.times) - n)
        return np.arange(lo, lo + n)

    def at(self, t: float, derivative: int = 0) -> np.ndarray:
        """Interpolated values (or time derivative) at ``t``."""
        t0, t1 = self.domain
        span = t1 - t0
        if t < t0 - 1e-12 * span or t > t1 + 1e-12 * span:
            raise SpectralError(f"time {t} outside sampled domain [{t0}, {t1}]")
        idx = self._stencil(t)
        nodes = self.times[idx]
        scale = nodes[-1] - nodes[0]
        w = _lagrange_weights((nodes - t) / scale, derivative) / scale**derivative
        return np.tensordot(w, self.frames[idx], axes=(0, 0))


def _lagrange_weights(nodes: np.ndarray, derivative: int) -> np.ndarray:
    # weights of the interpolating polynomial's derivative at 0
    n = len(nodes)
    if derivative >= n:
        return np.zeros(n)
    V = np.vander(nodes, n, increasing=True)
    rhs = np.zeros(n)
    rhs[derivative] = float(np.prod(np.arange(1, derivative + 1)))
    return np.linalg.solve(V.T, rhs)


def material_derivative(f: TimeSampledField, u: TimeSampledField, order: int = 4) -> TimeSampledField:
    """``d_t f + (u . grad) f`` on the common time grid.

    The time derivative uses finite differences of the given accuracy order on
    the sample grid (one-sided near the ends); the advection is spectral.
    """
    if not np.array_equal(f.times, u.times):
        raise SpectralError("time grids differ")
    nt = len(f.times)
    if nt < order + 1:
        raise SpectralError(f"need at least {order + 1} time samples, got {nt}")
    out = np.empty_like(f.frames)
    n = order + 1
    for i in range(nt):
        lo = min(max(i - n // 2, 0), nt - n)
        idx = np.arange(lo, lo + n)
        h = f.times[idx] - f.times[i]
        scale = np.max(np.abs(h)) or 1.0
        w = fd_weights(h / scale, 1) / scale
        dt = np.tensordot(w, f.frames[idx], axes=(0, 0))
        out[i] = dt + advect_values(u.frames[i], f.frames[i])
    return TimeSampledField(f.rank, f.times, out, f.order)
