import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from artifact.projectors import (
    MULTIPLIER,
    SpectralError,
    advective_commutator_values,
    dyadic_threshold,
    low_pass_symbol,
    mollify_values,
    project_low_values,
    quadratic_commutator_split,
    quadratic_commutator_values,
    smooth_step,
)
from artifact.spectral_core import (
    advect_values,
    curl_values,
    derivative_values,
    grid_points,
    to_fourier,
    truncate,
)
from artifact.verification import random_band_limited


def test_multiplier_shape():
    r = np.linspace(0, 3, 301)
    m = MULTIPLIER(r)
    assert np.all(m[r <= 1] == 1.0) and np.all(m[r >= 2] == 0.0)
    assert np.all(np.diff(m) <= 0)
    assert np.all((m >= 0) & (m <= 1))


def test_multiplier_midpoint():
    # the transition is symmetric about r = 3/2
    assert MULTIPLIER(1.5) == pytest.approx(0.5, abs=1e-15)


def test_dyadic_threshold():
    assert dyadic_threshold(8) == 8
    assert dyadic_threshold(11.9) == 8
    assert dyadic_threshold(1) == 1
    with pytest.raises(SpectralError):
        dyadic_threshold(0.5)


def test_constant_and_low_mode_pass(grid32):
    x = grid32
    assert np.allclose(project_low_values(np.full((32, 32, 32), 2.0), 1.0), 2.0)
    f = np.cos(3 * x[0])
    assert np.allclose(project_low_values(f, 8), f, atol=1e-14)


def test_high_mode_scaled_by_multiplier():
    N = 32
    x = grid_points(N)
    f = np.cos(12 * x[0])
    out = project_low_values(f, 8)
    assert np.allclose(out, 0.5 * f, atol=1e-13)


def test_mollify_below_cutoff_is_identity(grid32):
    x = grid32
    rho = 1 + np.cos(x[2])
    u = np.zeros((3, 32, 32, 32))
    p = np.sin(x[1])
    r, v, q = mollify_values(rho, u, p, 0.5)
    assert np.allclose(r, rho, atol=1e-14) and np.abs(v).max() == 0 and np.allclose(q, p, atol=1e-14)


def test_mollification_error_scales_with_second_derivatives(rng):
    N = 32
    rho = random_band_limited(rng, 1, N)[0]
    second = max(np.abs(derivative_values(rho[None], a)).max() for a in [(2, 0, 0), (0, 2, 0), (0, 0, 2), (1, 1, 0), (1, 0, 1), (0, 1, 1)])
    ratios = []
    for ell in (1.0, 0.5):
        err = np.abs(rho - project_low_values(rho, 1 / ell)).max()
        ratios.append(err / (ell**2 * second))
    assert max(ratios) < 10.0


def _solenoidal(rng, N):
    return truncate(curl_values(random_band_limited(rng, 3, N)))


def test_quadratic_commutator_two_routes():
    N = 32
    x = grid_points(N)
    rho = np.cos(2 * x[0])
    u = np.zeros((3, N, N, N))
    u[1] = 0.3 * np.cos(5 * x[0] + x[2])  # above the cutoff at ell = 1/2
    u[2] = 0.2 * np.sin(x[0])
    a = quadratic_commutator_values(rho, u, 0.5)
    b = quadratic_commutator_split(rho, u, 0.5)
    assert np.abs(a - b).max() <= 1e-10
    assert abs(a.mean()) < 1e-14


def test_quadratic_commutator_trivial_cases(rng):
    N = 16
    u = _solenoidal(rng, N)
    assert np.abs(quadratic_commutator_values(np.full((N, N, N), 3.0), u, 0.5)).max() < 1e-12
    rho = random_band_limited(rng, 1, N)[0]
    assert np.abs(quadratic_commutator_values(rho, np.zeros((3, N, N, N)), 0.5)).max() == 0


def test_quadratic_commutator_rejects_compressible(grid16):
    x = grid16
    u = np.stack([np.sin(x[0]), 0 * x[0], 0 * x[0]])
    with pytest.raises(SpectralError):
        quadratic_commutator_values(1 + 0 * x[0], u, 0.5)


def test_advective_commutator_orders(rng):
    N = 16
    u = _solenoidal(rng, N)
    H = random_band_limited(rng, 1, N)
    K = 2.0
    direct = advective_commutator_values(u, H, K)
    hatH = to_fourier(H)
    sym = low_pass_symbol(N, K)
    low_H = np.fft.irfftn(hatH * sym, s=(N, N, N), axes=(-3, -2, -1))
    adv = advect_values(u, H)
    low_adv = np.fft.irfftn(to_fourier(adv) * sym, s=(N, N, N), axes=(-3, -2, -1))
    assert np.abs(direct - (advect_values(u, low_H) - low_adv)).max() < 1e-12
    assert np.abs(advective_commutator_values(np.zeros_like(u), H, K)).max() == 0


@given(st.integers(0, 2**31 - 1), st.sampled_from([1.0, 2.0, 4.0, 6.0]))
def test_projection_twice_multiplies_symbol_squared(seed, K):
    N = 16
    f = random_band_limited(np.random.default_rng(seed), 1, N)
    twice = project_low_values(project_low_values(f, K), K)
    sym = low_pass_symbol(N, K)
    expect = np.fft.irfftn(to_fourier(f) * sym**2, s=(N, N, N), axes=(-3, -2, -1))
    assert np.abs(twice - expect).max() < 1e-13


@given(st.floats(-1.0, 2.0))
def test_smooth_step_bounded(x):
    v = float(smooth_step(x))
    assert 0.0 <= v <= 1.0
