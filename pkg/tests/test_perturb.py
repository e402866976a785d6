import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from artifact.cutoffs import SpatialPartition, TemporalPartition
from artifact.flows import backward_flow
from artifact.geometry import default_direction_families
from artifact.mikado import build_profiles, choose_shifts, shift_for
from artifact.perturb import (
    ResolutionError,
    StageContext,
    _wave_terms,
    assemble_principal,
    check_resolution,
    corrector_mode,
    divergence_corrector,
    mean_corrector,
    perturbation,
    raw_waves,
    resolution_report,
    wave_coefficients,
)
from artifact.spectral_core import curl_values, divergence_values, grid_points
from artifact.timefields import ConstantField, ZeroField

# tubes of radius 0.06 at unit frequency hold grid points at 64^3; one family
# of directions is placed disjointly at this size
FAT_ETA = 0.6
N = 64


def _context(families, profiles, shifts, R, Phi, S, lam=1.0, delta=1.0):
    tp = TemporalPartition(1.0)
    flows = {p: backward_flow(None, float(p), tp.support(p), R.N, zero=True) for p in (-1, 0, 1)}
    return StageContext(
        N=R.N, lam=lam, delta=delta, lam_q=1.0, gamma=0.25, N0=1e-3, mu_inv=3, families=families,
        profiles=profiles, shifts=shifts, temporal=tp, spatial=SpatialPartition(3), flows=flows,
        R_l=R, Phi_l=Phi, S_l=S,
    )


@pytest.fixture(scope="module")
def fat():
    families = default_direction_families()[:1]
    shifts = choose_shifts(families, FAT_ETA / 10.0, seed=3)
    profiles = build_profiles(families, FAT_ETA)
    rng = np.random.default_rng(1)
    R = ConstantField("vector", 1e-4 * rng.uniform(-1, 1, (3, N, N, N)))
    Phi = ConstantField("symmetric_tensor", 1e-3 * rng.uniform(-1, 1, (6, N, N, N)))
    S = ConstantField("symmetric_tensor", 1e-3 * rng.uniform(-1, 1, (6, N, N, N)))
    ctx = _context(families, profiles, shifts, R, Phi, S)
    return ctx, {t: perturbation(ctx, t) for t in (0.0, 0.5)}


def test_fat_configuration_is_resolved_by_points(fat):
    _, perts = fat
    for pt in perts.values():
        assert pt.diagnostics["points_inside_tubes"] > 0
        assert pt.diagnostics["waves"] > 0


def test_velocity_perturbation_is_divergence_free(fat):
    _, perts = fat
    for pt in perts.values():
        w = pt.w
        scale = max(np.abs(w).max(), 1e-300)
        assert np.abs(divergence_values(w)).max() <= 1e-10 * scale
        # the principal part alone is not solenoidal
        assert np.abs(divergence_values(pt.w0)).max() > 1e-3 * scale


def test_density_perturbation_is_mean_free(fat):
    _, perts = fat
    for pt in perts.values():
        assert np.any(pt.theta0 != 0.0)
        assert abs(np.mean(pt.theta)) <= 1e-12


def test_corrector_matches_curl_of_potential(fat):
    ctx, perts = fat
    pt = perts[0.0]
    w0, th0 = assemble_principal(ctx, 0.0)
    wc = divergence_corrector(ctx, 0.0)
    assert np.array_equal(w0, pt.w0) and np.array_equal(th0, pt.theta0)
    assert np.abs(w0 + wc - curl_values(pt.potential)).max() <= 1e-12 * np.abs(w0).max()


def test_wave_supports_are_disjoint(fat):
    ctx, _ = fat
    for t in (0.0, 0.5):
        owner = np.full(N**3, -1)
        for n, (cell, kind, j, inside, _) in enumerate(_wave_terms(ctx, ctx.weights(t), want=())):
            idx = cell.points[inside]
            assert np.all(owner[idx] == -1)
            owner[idx] = n


def test_principal_part_matches_direct_evaluation(fat):
    ctx, _ = fat
    t = 0.0
    raw = raw_waves(ctx, t)
    ws = ctx.weights(t)
    x = grid_points(N).reshape(3, -1)
    direct = np.zeros((3, N**3))
    for cell in ws.cells:
        fam = ctx.families[cell.cls]
        for kind in ("R", "Phi", "S"):
            fw = cell.families[kind]
            for j, h in enumerate(fam.vectors(kind)):
                prof = ctx.profile(h, kind)
                z = shift_for(ctx.shifts, cell.p, cell.cls, kind, j)
                psi = prof.psi_at(ctx.lam * x[:, cell.points], z)
                amp = cell.cutoff(kind) * fw.a[j]
                direct[:, cell.points] += amp * psi * np.asarray(h, dtype=float)[:, None]
    assert np.abs(direct).max() > 0
    assert np.abs(raw.w0 - direct).max() <= 1e-10 * np.abs(direct).max()


def test_no_active_waves_give_zero(fat):
    R = ZeroField("vector", 16)
    Phi = ZeroField("symmetric_tensor", 16)
    S = ZeroField("symmetric_tensor", 16)
    ctx = _context([], fat[0].profiles, {}, R, Phi, S)
    pt = perturbation(ctx, 0.0)
    assert not np.any(pt.w) and not np.any(pt.theta)
    assert pt.theta_c == 0.0


def test_mean_corrector_examples():
    assert mean_corrector(np.full((4, 4, 4), 2.5)) == -2.5
    x = grid_points(8)
    assert mean_corrector(np.sin(x[0])) == pytest.approx(0.0, abs=1e-16)


@given(arrays(float, (6, 6, 6), elements=st.floats(-10, 10)))
def test_mean_corrector_removes_the_mean(theta):
    assert abs(np.mean(theta + mean_corrector(theta))) <= 1e-15 * max(1.0, np.abs(theta).max())


def test_resolution_guard():
    rep = resolution_report(12.0, 64, 2.5e-3)
    assert not rep["resolved"] and rep["minimal_grid"] > 64
    with pytest.raises(ResolutionError, match="at least"):
        check_resolution(12.0, 64, 2.5e-3, strict=True)
    assert check_resolution(12.0, 64, 2.5e-3, strict=False)["resolved"] is False


def _spectral_curl_complex(V, n):
    k = np.fft.fftfreq(n, 1.0 / n)
    K = np.meshgrid(k, k, k, indexing="ij")
    hat = np.fft.fftn(V, axes=(1, 2, 3))
    d = lambda c, i: np.fft.ifftn(1j * K[i] * hat[c])
    return np.stack([d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1)])


@pytest.mark.parametrize("shear", [False, True])
def test_corrector_mode_is_a_curl(shear):
    n, lam = 24, 2.0
    x = grid_points(n)
    h = np.array([0.0, 0.0, 1.0])
    m = np.array([1.0, 1.0, 0.0])
    J = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) if shear else np.eye(3)
    xi = np.einsum("ij,j...->i...", J, x)
    A = 2.0 + np.sin(x[0]) * np.cos(x[2])
    gradA = np.stack([np.cos(x[0]) * np.cos(x[2]), np.zeros_like(A), -np.sin(x[0]) * np.sin(x[2])])
    vec = 1j * np.cross(m, h) / (m @ m)
    V = A / lam * np.einsum("mi,m->i", J, vec)[:, None, None, None] * np.exp(1j * lam * np.tensordot(m, xi, axes=(0, 0)))
    expect = _spectral_curl_complex(V, n)
    Jfield = None if not shear else np.broadcast_to(J[:, :, None, None, None], (3, 3) + A.shape)
    got = corrector_mode(A, gradA, h, m, lam, xi, Jfield)
    assert np.abs(got - expect).max() <= 1e-9 * np.abs(expect).max()


def test_corrector_mode_constant_amplitude_has_no_correction():
    n = 8
    x = grid_points(n)
    A = np.full(x[0].shape, 3.0)
    h, m = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 2.0])
    got = corrector_mode(A, np.zeros((3,) + A.shape), h, m, 1.0, x)
    phase = np.exp(1j * np.tensordot(m, x, axes=(0, 0)))
    assert np.abs(got - A * h[:, None, None, None] * phase).max() == 0.0


def test_transport_coefficient_formula(fat):
    ctx, _ = fat
    t = 0.0
    ws = wave_coefficients(ctx, t, M=2)
    entry = next(e for e in ws.entries if e["kind"] == "R")
    ms, coef = entry["tables"]["psi_phi"]
    m = tuple(int(v) for v in ms[1])
    got = ws.coefficient("d", entry["p"], m)
    prof = ctx.profile(ctx.families[entry["cls"]].vectors("R")[entry["j"]], "R")
    m_all, raw_tab = prof.table("psi_phi", 2)
    row = np.flatnonzero(np.all(m_all == np.array(m), axis=1))[0]
    z = shift_for(ctx.shifts, entry["p"], entry["cls"], "R", entry["j"])
    dot = raw_tab[row] * np.exp(-1j * (np.array(m) @ z))
    others = [e for e in ws.entries if e["p"] == entry["p"] and e is not entry]
    pts = entry["points"]
    expect = entry["cut"] ** 2 / ctx.delta * entry["a"] * entry["b"] * dot * entry["tilted"]
    # other waves of the same time index add their own coefficients; remove them
    for e in others:
        ms_e, coef_e = e["tables"]["psi_phi"]
        hit = np.flatnonzero(np.all(ms_e == np.array(m), axis=1))
        if hit.size:
            extra = np.zeros((3, N**3), dtype=complex)
            extra[:, e["points"]] = e["cut"] ** 2 / ctx.delta * e["a"] * e["b"] * coef_e[hit[0]] * e["tilted"]
            got = got - extra
    assert np.abs(got[:, pts] - expect).max() <= 1e-12 * max(np.abs(expect).max(), 1e-300)
