"""Littlewood-Paley projections, Eulerian mollification and the density commutator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral_core import (
    SpectralError,
    SpectralField,
    advect_values,
    divergence_values,
    to_fourier,
    to_grid,
    truncate,
    wavenumber_sq,
)


def smooth_step(x: np.ndarray | float) -> np.ndarray:
    """C-infinity step: 0 for ``x <= 0``, 1 for ``x >= 1``, monotone in between."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        f0 = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        y = 1.0 - x
        f1 = np.where(y > 0, np.exp(-1.0 / np.where(y > 0, y, 1.0)), 0.0)
        out = f0 / (f0 + f1)
    return np.where(x <= 0, 0.0, np.where(x >= 1, 1.0, out))


@dataclass(frozen=True)
class CutoffMultiplier:
    """Radial multiplier ``m(r)``: 1 on ``r <= 1``, 0 on ``r >= 2``, smooth between."""

    def __call__(self, r: np.ndarray | float) -> np.ndarray:
        return smooth_step(2.0 - np.asarray(r, dtype=float))


MULTIPLIER = CutoffMultiplier()


def dyadic_threshold(K: float) -> int:
    """``2^I`` with ``I = floor(log2 K)``."""
    if K < 1:
        raise SpectralError(f"projection threshold must be >= 1, got {K}")
    return 2 ** int(np.floor(np.log2(K) + 1e-12))


def low_pass_symbol(N: int, K: float) -> np.ndarray:
    scale = dyadic_threshold(K)
    return MULTIPLIER(np.sqrt(wavenumber_sq(N)) / scale)


def project_low_values(values: np.ndarray, K: float) -> np.ndarray:
    N = values.shape[-1]
    return to_grid(to_fourier(values) * low_pass_symbol(N, K), N)


def project_high_values(values: np.ndarray, K: float) -> np.ndarray:
    return values - project_low_values(values, K)


def project_low(f: SpectralField, K: float) -> SpectralField:
    """``P_{<=K} f``: multiply coefficients by ``m(|k| / 2^I)``."""
    return SpectralField(f.rank, project_low_values(f.values, K))


def project_high(f: SpectralField, K: float) -> SpectralField:
    return SpectralField(f.rank, project_high_values(f.values, K))


def mollify_values(rho: np.ndarray, u: np.ndarray, p: np.ndarray, ell: float):
    """Low-pass density, velocity and pressure at frequency ``1/ell``."""
    K = 1.0 / ell
    return project_low_values(rho, K), project_low_values(u, K), project_low_values(p, K)


def _check_solenoidal(u: np.ndarray, tol: float = 1e-10):
    scale = max(np.abs(u).max(), 1e-300)
    div = np.abs(divergence_values(u)).max()
    if div > tol * max(scale, 1.0):
        raise SpectralError(f"velocity is not divergence free (|div u| = {div:.3e})")


def quadratic_commutator_values(rho: np.ndarray, u: np.ndarray, ell: float, check: bool = True) -> np.ndarray:
    """``div(rho_l u_l - (rho u)_l)`` with de-aliased products."""
    rho = rho.reshape(rho.shape[-3:])
    if check:
        _check_solenoidal(u)
    K = 1.0 / ell
    rho_l = project_low_values(rho, K)
    u_l = project_low_values(u, K)
    flux = truncate(rho_l * u_l) - project_low_values(truncate(rho * u), K)
    return divergence_values(flux)


def quadratic_commutator_split(rho: np.ndarray, u: np.ndarray, ell: float) -> np.ndarray:
    """Same commutator through ``(u_l - u).grad rho_l + [u.grad, P] rho``."""
    rho = rho.reshape(rho.shape[-3:])
    K = 1.0 / ell
    rho_l = project_low_values(rho, K)
    u_l = project_low_values(u, K)
    return advect_values(u_l - u, rho_l) + advective_commutator_values(u, rho, K)


def quadratic_commutator(rho: SpectralField, u: SpectralField, ell: float) -> SpectralField:
    return SpectralField("scalar", quadratic_commutator_values(rho.values, u.values, ell))


def advective_commutator_values(u: np.ndarray, H: np.ndarray, K: float) -> np.ndarray:
    """``(u . grad) P_{<=K} H - P_{<=K}((u . grad) H)``."""
    return advect_values(u, project_low_values(H, K)) - project_low_values(advect_values(u, H), K)


def advective_commutator(u: SpectralField, H: SpectralField, K: float) -> SpectralField:
    return SpectralField(H.rank, advective_commutator_values(u.values, H.values, K))
