import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from artifact.flows import (
    FlowError,
    backward_flow,
    determinant_3x3,
    flow_mollify,
    forward_flow,
    inverse_3x3,
    mollifier,
    time_mollify,
)
from artifact.spectral_core import grid_points
from artifact.timefields import ClosedFormField
from artifact.verification import one_mode_velocity

N = 16


def _wrap(d):
    return np.mod(d + np.pi, 2 * np.pi) - np.pi


def test_zero_velocity_gives_identity():
    fm = backward_flow(lambda t: np.zeros((3, N, N, N)), 0.0, (-0.5, 0.5), N, dt=1 / 16)
    x = grid_points(N)
    for t in (-0.5, 0.0, 0.3):
        assert np.abs(_wrap(fm.xi(t) - x)).max() == 0.0
        assert np.abs(fm.grad(t) - np.eye(3)[:, :, None, None, None]).max() == 0.0


def test_constant_velocity_translates():
    U = np.array([0.3, -0.2, 0.1])
    field = np.broadcast_to(U[:, None, None, None], (3, N, N, N)).copy()
    anchor = 0.1
    fm = backward_flow(lambda t: field, anchor, (-0.4, 0.6), N, dt=1 / 32)
    x = grid_points(N)
    for t in (-0.4, 0.35, 0.6):
        expect = x - (t - anchor) * U[:, None, None, None]
        assert np.abs(_wrap(fm.xi(t) - expect)).max() <= 1e-12
        assert np.abs(fm.grad(t) - np.eye(3)[:, :, None, None, None]).max() <= 1e-12
    pts = x.reshape(3, -1)
    fwd = forward_flow(lambda t: field, anchor, pts, 0.5, steps=8)
    assert np.abs(_wrap(fwd - (pts + 0.4 * U[:, None]))).max() <= 1e-12


@pytest.fixture(scope="module")
def one_mode_flow():
    u = one_mode_velocity(0.1, N)
    return u, backward_flow(u, 0.0, (-0.5, 0.5), N, dt=1 / 64)


def test_round_trip_and_volume(one_mode_flow):
    u, fm = one_mode_flow
    x = grid_points(N).reshape(3, -1)
    for t in np.linspace(-0.5, 0.5, 5):
        back = forward_flow(u, 0.0, fm.xi(t).reshape(3, -1), t, steps=64)
        assert np.abs(_wrap(back - x)).max() <= 1e-6
        J = fm.grad(t)
        assert np.abs(determinant_3x3(J) - 1.0).max() <= 1e-6
        prod = np.einsum("ij...,jk...->ik...", J, fm.grad_inverse(t))
        assert np.abs(prod - np.eye(3)[:, :, None, None, None]).max() <= 1e-12


def test_time_refinement_order():
    u = one_mode_velocity(0.1, N)
    ends = [np.asarray(backward_flow(u, 0.0, (0.0, 0.5), N, dt=dt, check=False).disp(0.5)) for dt in (1 / 4, 1 / 8, 1 / 16, 1 / 128)]
    errs = [np.abs(e - ends[-1]).max() for e in ends[:-1]]
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert min(orders) >= 3.0


def test_cfl_violation_raises():
    u = one_mode_velocity(50.0, N)
    with pytest.raises(FlowError):
        backward_flow(u, 0.0, (0.0, 0.5), N, dt=0.25)


def test_compressible_velocity_raises():
    x = grid_points(N)
    field = 0.1 * np.stack([np.sin(x[0]), np.zeros_like(x[0]), np.zeros_like(x[0])])
    with pytest.raises(FlowError):
        backward_flow(lambda t: field, 0.0, (0.0, 0.2), N, dt=1 / 32)


def test_inverse_and_determinant_match_numpy(rng):
    J = rng.standard_normal((3, 3, 4, 4, 4)) + 3 * np.eye(3)[:, :, None, None, None]
    mats = np.moveaxis(J.reshape(3, 3, -1), -1, 0)
    assert np.allclose(determinant_3x3(J).ravel(), np.linalg.det(mats), rtol=1e-12, atol=0)
    inv = np.moveaxis(inverse_3x3(J).reshape(3, 3, -1), -1, 0)
    assert np.allclose(inv, np.linalg.inv(mats), rtol=1e-10, atol=1e-12)


def _mollifier_oracle(g, t, delta):
    norm = quad(lambda s: math.exp(-1.0 / (1.0 - s * s)), -1, 1, epsabs=1e-15)[0]
    val = quad(lambda s: g(t + delta * s) * math.exp(-1.0 / (1.0 - s * s)), -1, 1, epsabs=1e-15)[0]
    return val / norm


def test_mollifier_normalised():
    s = np.linspace(-0.999, 0.999, 2001)
    total = np.trapezoid(mollifier(s), s)
    assert abs(total - 1.0) <= 1e-6
    assert mollifier(np.array([1.0, -1.0, 1.5])).max() == 0.0


def test_time_mollification_matches_quadrature():
    x = grid_points(8)
    g = lambda t: math.sin(3 * t) + t**2
    F = lambda t: g(t) * np.cos(x[0])[None]
    t, delta = 0.2, 0.3
    got = flow_mollify(F, None, delta, t)
    expect = _mollifier_oracle(g, t, delta) * np.cos(x[0])[None]
    assert np.abs(got - expect).max() <= 1e-10


def test_constant_in_time_is_unchanged():
    x = grid_points(8)
    F = lambda t: np.cos(x[1])[None]
    assert np.abs(flow_mollify(F, None, 0.4, 0.0) - F(0.0)).max() <= 1e-13


def test_domain_too_small_raises():
    F = lambda t: np.zeros((1, 8, 8, 8))
    with pytest.raises(FlowError):
        flow_mollify(F, None, 0.5, 0.2, domain=(0.0, 1.0))


def test_chebyshev_route_agrees_with_quadrature_route():
    n = 8
    x = grid_points(n)

    def jet(t, k):
        base = np.sin(x[0] + x[2])[None]
        out = [(math.exp(t) + t**3) * base]
        for order in range(1, k + 1):
            out.append((math.exp(t) + (6 * t if order == 2 else 3 * t**2 if order == 1 else 6 if order == 3 else 0)) * base)
        return out

    F = ClosedFormField("scalar", n, jet)
    interval, delta = (-0.5, 0.5), 0.2
    cheb = time_mollify(F, delta, interval, nodes=20)
    for t in (-0.4, 0.0, 0.45):
        direct = flow_mollify(lambda s: np.asarray(F.value(s)), None, delta, t)
        assert np.abs(np.asarray(cheb.value(t)) - direct).max() <= 1e-10


def test_advective_derivative_commutes_with_flow_mollification():
    n = 16
    x = grid_points(n)
    u = one_mode_velocity(0.1, n)
    F = lambda t: (t * np.sin(x[0]))[None]
    DF = lambda t: (np.sin(x[0]) + t * u(t)[0] * np.cos(x[0]))[None]
    delta, t, h = 0.2, 0.3, 1e-3
    mol = lambda s: flow_mollify(F, u, delta, s, steps=16)
    stencil = (-1 / 12, 2 / 3, 0.0, -2 / 3, 1 / 12)
    dt = sum(c * mol(t + j * h) for c, j in zip(stencil, (2, 1, 0, -1, -2)) if c) / h
    m0 = mol(t)[0]
    k = np.fft.fftfreq(n, 1.0 / n)
    grad = [np.real(np.fft.ifftn(1j * np.meshgrid(k, k, k, indexing="ij")[i] * np.fft.fftn(m0))) for i in range(3)]
    lhs = dt[0] + sum(u(t)[i] * grad[i] for i in range(3))
    rhs = flow_mollify(DF, u, delta, t, steps=16)[0]
    assert np.abs(lhs - rhs).max() <= 1e-6


@given(st.floats(-0.5, 0.5), st.floats(0.05, 0.4))
def test_mollifying_linear_functions_is_exact(t, delta):
    x = grid_points(4)
    F = lambda s: (2.0 * s - 1.0) * np.ones((1,) + x[0].shape)
    assert np.abs(flow_mollify(F, None, delta, t) - F(t)).max() <= 1e-12
