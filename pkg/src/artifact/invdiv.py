"""Inverse divergence operators.

* ``inv_div_vector``: vector -> symmetric trace-free tensor, ``div R = g - <g>``.
* ``inv_div_scalar``: scalar -> vector, ``(R f)_i = Delta^{-1} d_i f``.
* ``local_inv_div``: the localized iterative operator acting on products
  ``G (zeta o xi)`` of a slowly varying vector field with a fast periodic
  function composed with a volume-preserving map.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .spectral_core import (
    PAIR_INDEX,
    TENSOR_PAIRS,
    SpectralError,
    SpectralField,
    _kill_nyquist,
    _unit,
    divergence_values,
    to_fourier,
    to_grid,
    wavenumber_sq,
    wavenumbers,
)


def _inverse_sq(N: int) -> np.ndarray:
    ksq = wavenumber_sq(N)
    with np.errstate(divide="ignore"):
        return np.where(ksq > 0, 1.0 / np.where(ksq > 0, ksq, 1.0), 0.0)


def _d(N: int, j: int) -> np.ndarray:
    return _kill_nyquist(1j * wavenumbers(N)[j], N, _unit(j))


def inv_div_vector_coeffs(ghat: np.ndarray, N: int) -> np.ndarray:
    """Fourier coefficients of the symmetric trace-free inverse divergence.

    With ``Delta v = g - <g>`` and ``P`` the Leray projector,
    ``R = 1/4 (grad Pv + grad Pv^T) + 3/4 (grad v + grad v^T) - 1/2 (div v) Id``.
    """
    inv = _inverse_sq(N)
    d = [_d(N, j) for j in range(3)]
    vhat = -ghat * inv  # Delta^{-1}, mean dropped
    divv = sum(d[j] * vhat[j] for j in range(3))
    # Leray: Pv = v - grad Delta^{-1} div v
    pvhat = np.stack([vhat[i] + d[i] * divv * inv for i in range(3)])
    out = np.empty((6,) + ghat.shape[1:], dtype=complex)
    for c, (i, j) in enumerate(TENSOR_PAIRS):
        val = 0.25 * (d[i] * pvhat[j] + d[j] * pvhat[i]) + 0.75 * (d[i] * vhat[j] + d[j] * vhat[i])
        if i == j:
            val = val - 0.5 * divv
        out[c] = val
    return out


def inv_div_vector_values(g: np.ndarray) -> np.ndarray:
    N = g.shape[-1]
    return to_grid(inv_div_vector_coeffs(to_fourier(g), N), N)


def inv_div_vector(g: SpectralField) -> SpectralField:
    """Symmetric trace-free ``R`` with ``div R = g - <g>``."""
    if g.rank != "vector":
        raise SpectralError("inv_div_vector needs a vector field")
    return SpectralField("symmetric_tensor", inv_div_vector_values(g.values))


def inv_div_scalar_values(f: np.ndarray) -> np.ndarray:
    f = f.reshape(f.shape[-3:])
    N = f.shape[-1]
    inv = _inverse_sq(N)
    fhat = to_fourier(f)
    return np.stack([to_grid(-_d(N, i) * fhat * inv, N) for i in range(3)])


def inv_div_scalar(f: SpectralField) -> SpectralField:
    """Vector ``Delta^{-1} grad f`` whose divergence is ``f - <f>``."""
    if f.rank != "scalar":
        raise SpectralError("inv_div_scalar needs a scalar field")
    return SpectralField("vector", inv_div_scalar_values(f.values))


# ---------------------------------------------------------------------------
# tensor potentials


@dataclass
class TensorPotential:
    """Symmetric rank-``d`` potential ``theta^{(i1..id)} = Delta^{-d} d_{i1}..d_{id} zeta``.

    Only sorted index tuples are stored; every permutation maps to the same array.
    """

    order: int
    components: dict[tuple[int, ...], np.ndarray]

    def __getitem__(self, index: tuple[int, ...]) -> np.ndarray:
        return self.components[tuple(sorted(index))]

    def recompose(self) -> np.ndarray:
        """``sum over all ordered tuples of d_{i1}..d_{id} theta^{(i1..id)}``."""
        first = next(iter(self.components.values()))
        N = first.shape[-1]
        acc = np.zeros((N, N, N // 2 + 1), dtype=complex)
        for idx, comp in self.components.items():
            mult = _multiplicity(idx)
            sym = np.ones(1, dtype=complex)
            for i in idx:
                sym = sym * (1j * wavenumbers(N)[i])
            acc += mult * sym * to_fourier(comp)
        return to_grid(acc, N)


def _multiplicity(idx: tuple[int, ...]) -> int:
    counts = [idx.count(i) for i in range(3)]
    return math.factorial(len(idx)) // math.prod(math.factorial(c) for c in counts)


def tensor_potential(zeta: SpectralField | np.ndarray, d: int, tol: float = 1e-12) -> TensorPotential:
    """Build the symmetric potential of order ``d`` for a mean-zero scalar."""
    values = zeta.values[0] if isinstance(zeta, SpectralField) else np.asarray(zeta)
    values = values.reshape(values.shape[-3:])
    if d < 1:
        raise SpectralError("potential order must be positive")
    scale = max(np.abs(values).max(), 1e-300)
    if abs(values.mean()) > tol * scale:
        raise SpectralError("tensor potential needs a mean-zero scalar")
    N = values.shape[-1]
    zhat = to_fourier(values)
    ks = wavenumbers(N)
    inv = _inverse_sq(N)
    base = zhat * (-inv) ** d
    comps = {}
    for idx in itertools.combinations_with_replacement(range(3), d):
        sym = np.ones(1, dtype=complex)
        for i in idx:
            sym = sym * (1j * ks[i])
        comps[idx] = to_grid(base * sym, N)
    return TensorPotential(d, comps)


# ---------------------------------------------------------------------------
# localized inverse divergence


@dataclass(frozen=True)
class FourierSeries:
    """Sparse real periodic function ``sum_k c_k exp(i k.y)`` (conjugate pairs implied by realness)."""

    modes: np.ndarray  # (M, 3) integer wavevectors
    coeffs: np.ndarray  # (M,) complex

    @classmethod
    def from_grid(cls, values: np.ndarray, tol: float = 1e-14) -> "FourierSeries":
        values = values.reshape(values.shape[-3:])
        N = values.shape[-1]
        hat = np.fft.fftn(values) / N**3
        keep = np.abs(hat) > tol * max(np.abs(hat).max(), 1e-300)
        idx = np.argwhere(keep)
        k = np.where(idx > N // 2, idx - N, idx)
        return cls(k.astype(float), hat[keep])

    def apply(self, symbol) -> "FourierSeries":
        """Multiply every coefficient by ``symbol(k)`` (vectorized over modes)."""
        return FourierSeries(self.modes, self.coeffs * symbol(self.modes))

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at ``points`` of shape ``(3, ...)``."""
        shape = points.shape[1:]
        pts = points.reshape(3, -1)
        out = np.zeros(pts.shape[1], dtype=complex)
        for k, c in zip(self.modes, self.coeffs):
            out += c * np.exp(1j * (k @ pts))
        return out.real.reshape(shape)


def _derivative_symbol(index: tuple[int, ...], inverse_power: int):
    def symbol(k):
        ksq = np.sum(k**2, axis=1)
        val = np.ones(len(k), dtype=complex)
        for i in index:
            val = val * (1j * k[:, i])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(ksq > 0, (-1.0 / np.where(ksq > 0, ksq, 1.0)) ** inverse_power, 0.0)
        return val * inv

    return symbol


@dataclass(frozen=True)
class FlowMapSample:
    """A volume-preserving map sampled on a grid: values ``xi`` and ``A = (grad xi)^{-1}``."""

    xi: np.ndarray  # (3, N, N, N) positions (not reduced mod 2 pi)
    grad: np.ndarray  # (3, 3, N, N, N), grad[m, l] = d_l xi^m
    inverse: np.ndarray  # (3, 3, N, N, N), A[i, l] with A_i^l d_l xi^m = delta_i^m

    @classmethod
    def identity(cls, N: int) -> "FlowMapSample":
        from .spectral_core import grid_points

        eye = np.broadcast_to(np.eye(3)[:, :, None, None, None], (3, 3, N, N, N)).copy()
        return cls(grid_points(N), eye, eye.copy())


def _jacobian_ok(flow: FlowMapSample, support: np.ndarray | None, bound: float = 0.5):
    dev = flow.grad - np.eye(3)[:, :, None, None, None]
    dev = np.max(np.abs(dev), axis=(0, 1))
    if support is not None:
        dev = np.where(support, dev, 0.0)
    worst = float(dev.max())
    if worst > bound:
        raise SpectralError(f"|grad xi - Id| = {worst:.3f} exceeds {bound} on supp G")


@dataclass
class HighFrequencyTerm:
    """One summand ``coefficient^k * (Z o xi)`` with ``Z = symbol(d) zeta``."""

    coefficient: np.ndarray  # (3, N, N, N)
    index: tuple[int, ...]  # derivative multi-index applied to zeta
    inverse_power: int  # power of Delta^{-1} applied to zeta


def _grad_scalar_pointwise(values: np.ndarray) -> np.ndarray:
    N = values.shape[-1]
    hat = to_fourier(values)
    return np.stack([to_grid(_d(N, j) * hat, N) for j in range(3)])


def _hf(zeta: FourierSeries, flow: FlowMapSample, index, power, cache: dict | None):
    key = (tuple(sorted(index)), power)
    if cache is not None and key in cache:
        return cache[key]
    val = zeta.apply(_derivative_symbol(key[0], power)).evaluate(flow.xi)
    if cache is not None:
        cache[key] = val
    return val


def local_inv_div_step(
    terms: list[HighFrequencyTerm],
    zeta: FourierSeries,
    flow: FlowMapSample,
    check_jacobian: bool = True,
    cache: dict | None = None,
):
    """One application of the iteration step to a sum of terms.

    For every term ``G^k (Z o xi)`` with ``Z = d_i d_j theta^{(ij)}`` and
    ``theta^{(ij)} = Delta^{-2} d_i d_j Z`` this returns the symmetric stress

    ``R^{kl} = G^k A_i^l (g_i o xi) + G^l A_i^k (g_i o xi)
              - G^n d_n xi^m A_i^k A_j^l (d_m theta^{(ij)} o xi)``

    with ``g_i = d_j theta^{(ij)}``, and the remaining terms of
    ``E^k = -d_l(G^l A_i^k)(g_i o xi) - (d_l G^k) A_i^l (g_i o xi)
            + d_n(G^l A_i^k d_l xi^m) A_j^n (d_m theta^{(ij)} o xi)``.
    """
    if not terms:
        return None, []
    N = terms[0].coefficient.shape[-1]
    A = flow.inverse
    Dxi = flow.grad
    if check_jacobian:
        support = np.any(np.stack([np.abs(t.coefficient).sum(axis=0) > 0 for t in terms]), axis=0)
        _jacobian_ok(flow, support)
    R = np.zeros((3, 3, N, N, N))
    merged: dict[tuple, np.ndarray] = {}

    def emit(coeff, index, power):
        key = (tuple(sorted(index)), power)
        if key in merged:
            merged[key] += coeff
        else:
            merged[key] = coeff
    for term in terms:
        G = term.coefficient
        base, power = term.index, term.inverse_power
        # g_i = d_j theta^{(ij)} = Delta^{-1} d_i Z
        g = [_hf(zeta, flow, base + (i,), power + 1, cache) for i in range(3)]
        # d_m theta^{(ij)} = Delta^{-2} d_i d_j d_m Z
        dtheta = {}
        for i, j, m in itertools.product(range(3), repeat=3):
            key = tuple(sorted((i, j, m)))
            if key not in dtheta:
                dtheta[key] = _hf(zeta, flow, base + key, power + 2, cache)
        # Gxi^m = G^n d_n xi^m
        Gxi = np.einsum("n...,mn...->m...", G, Dxi)
        Ag = sum(A[i] * g[i] for i in range(3))  # (Ag)^l = A_i^l g_i, A[i] has axis l
        for k in range(3):
            for l in range(3):
                R[k, l] += G[k] * Ag[l] + G[l] * Ag[k]
        for i, j, m in itertools.product(range(3), repeat=3):
            w = Gxi[m] * dtheta[tuple(sorted((i, j, m)))]
            R -= A[i][:, None] * A[j][None, :] * w
        # error terms, grouped by their high-frequency factor
        for i in range(3):
            coeff = np.zeros((3, N, N, N))
            for k in range(3):
                flux = np.stack([G[l] * A[i, k] for l in range(3)])
                coeff[k] -= divergence_values(flux)
                dG = _grad_scalar_pointwise(G[k])
                coeff[k] -= sum(dG[l] * A[i, l] for l in range(3))
            emit(coeff, base + (i,), power + 1)
        for i, j, m in itertools.product(range(3), repeat=3):
            coeff = np.zeros((3, N, N, N))
            for k in range(3):
                q = sum(G[l] * A[i, k] * Dxi[m, l] for l in range(3))
                dq = _grad_scalar_pointwise(q)
                coeff[k] += sum(dq[n] * A[j, n] for n in range(3))
            emit(coeff, base + (i, j, m), power + 2)
    return R, [HighFrequencyTerm(c, k[0], k[1]) for k, c in merged.items()]


def evaluate_terms(
    terms: list[HighFrequencyTerm], zeta: FourierSeries, flow: FlowMapSample, cache: dict | None = None
) -> np.ndarray:
    """Sum ``coefficient^k (Z o xi)`` over terms."""
    if not terms:
        return 0.0
    out = np.zeros_like(terms[0].coefficient)
    for t in terms:
        out += t.coefficient * _hf(zeta, flow, t.index, t.inverse_power, cache)
    return out


@dataclass
class LocalInvDivConfig:
    """Iteration depth and the scale parameters recorded for reports."""

    d: int = 4
    scales: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise SpectralError("iteration depth d must be even and >= 2")


@dataclass
class LocalInvDivResult:
    local: np.ndarray  # (6, N, N, N)
    nonlocal_part: np.ndarray  # (6, N, N, N)
    residual_norms: list[float]
    final_error: np.ndarray


def local_inv_div(
    G: np.ndarray,
    zeta: FourierSeries | np.ndarray,
    flow: FlowMapSample | None = None,
    cfg: LocalInvDivConfig | None = None,
) -> LocalInvDivResult:
    """Split ``G (zeta o xi) - <.>`` into ``div(R_local + R_nonlocal)``.

    The step is applied ``d/2`` times, each time to the error of the previous
    one; the last error is handed to the nonlocal operator.  The sup norms of
    the input and of each successive error are returned for decay checks.
    """
    cfg = cfg or LocalInvDivConfig()
    N = G.shape[-1]
    flow = flow or FlowMapSample.identity(N)
    if not isinstance(zeta, FourierSeries):
        zeta = FourierSeries.from_grid(np.asarray(zeta))
    terms = [HighFrequencyTerm(np.asarray(G, dtype=float), (), 0)]
    total = np.zeros((3, 3, N, N, N))
    cache: dict = {}
    err = evaluate_terms(terms, zeta, flow, cache)
    norms = [float(np.abs(err).max())]
    for _ in range(cfg.d // 2):
        R, terms = local_inv_div_step(terms, zeta, flow, cache=cache)
        total += R
        err = evaluate_terms(terms, zeta, flow, cache)
        norms.append(float(np.abs(err).max()))
    for a, b in zip(norms, norms[1:]):
        if b >= a > 0:
            warnings.warn("local inverse divergence residual did not decrease", RuntimeWarning)
            break
    local = np.stack([total[i, j] for i, j in TENSOR_PAIRS])
    nonlocal_part = inv_div_vector_values(err)
    return LocalInvDivResult(local, nonlocal_part, norms, err)
