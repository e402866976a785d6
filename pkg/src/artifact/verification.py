"""Self-contained verification suites behind ``artifact verify``.

Every suite returns a dict with an ``ok`` flag, the measured quantities and
its wall-clock time.
"""

from __future__ import annotations

import math
import time

import numpy as np

from .geometry import (
    BASE_CUBIC,
    BASE_QUADRATIC,
    BASE_TRANSPORT,
    default_direction_families,
    first_coefficients,
    gamma_second,
    sym_basis,
    verify_family,
)
from .invdiv import inv_div_vector_values
from .mikado import check_moments, min_pair_distance, support_overlap_count, verify_stationary
from .spectral_core import band_mask, divergence_values, grid_points, sym_to_matrix, to_fourier, to_grid
from .weights import cancellation_report

SYM_ID = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])


def random_band_limited(rng, ncomp: int, N: int, mean_zero: bool = True) -> np.ndarray:
    """Real random field whose Fourier support lies in the retained band."""
    v = rng.standard_normal((ncomp, N, N, N))
    hat = to_fourier(v) * band_mask(N)
    if mean_zero:
        hat[..., 0, 0, 0] = 0.0
    return to_grid(hat, N)


def suite_invdiv(seed: int = 0, count: int = 50, N: int = 32) -> dict:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_sym = worst_trace = worst_div = 0.0
    for _ in range(count):
        g = random_band_limited(rng, 3, N)
        Rg = inv_div_vector_values(g)
        mat = sym_to_matrix(Rg)
        scale = max(np.abs(Rg).max(), 1e-300)
        worst_sym = max(worst_sym, float(np.abs(mat - np.swapaxes(mat, 0, 1)).max() / scale))
        worst_trace = max(worst_trace, float(np.abs(Rg[0] + Rg[1] + Rg[2]).max() / scale))
        div = np.stack([divergence_values(np.stack([mat[i, j] for j in range(3)])) for i in range(3)])
        gm = g - g.mean(axis=(1, 2, 3), keepdims=True)
        worst_div = max(worst_div, float(np.abs(div - gm).max() / np.abs(g).max()))
    elapsed = time.perf_counter() - t0
    ok = worst_sym <= 1e-13 and worst_trace <= 1e-13 and worst_div <= 1e-10 and elapsed < 10.0
    return {"ok": bool(ok), "symmetry": worst_sym, "trace": worst_trace, "divergence": worst_div, "seconds": elapsed}


def _random_symmetric(rng, size: float) -> np.ndarray:
    return rng.uniform(-size, size, 6)


def suite_geometry(seed: int = 0, count: int = 100, N0: float = 1e-3) -> dict:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    out: dict = {}
    first_res = 0.0
    first_min = math.inf
    for fam in (BASE_CUBIC, BASE_QUADRATIC):
        B = sym_basis(fam)
        for _ in range(count):
            A = SYM_ID - _random_symmetric(rng, 0.1)
            c = first_coefficients(fam, A)
            first_res = max(first_res, float(np.abs(B @ c - A).max()))
            first_min = min(first_min, float(c.min()))
    gamma_id = np.sqrt(first_coefficients(BASE_CUBIC, SYM_ID))
    out["first"] = {
        "reconstruction": first_res,
        "min_coefficient": first_min,
        "gamma_at_identity": gamma_id.tolist(),
        "frame_sum": (BASE_CUBIC.T @ BASE_CUBIC).tolist(),
    }
    second_res = 0.0
    second_min = math.inf
    h = BASE_TRANSPORT.astype(float)
    for _ in range(count):
        w = rng.standard_normal(3)
        w *= rng.uniform(0, 1) * N0 / np.linalg.norm(w)
        G = gamma_second(h, w[:, None], N0)[:, 0]
        second_res = max(second_res, float(np.abs(h.T @ G - w).max()))
        second_min = min(second_min, float(G.min()))
    out["second"] = {"reconstruction": second_res, "min_coefficient": second_min, "N0": N0}
    fams = default_direction_families()
    out["families_ok"] = all(verify_family(f)["ok"] for f in fams)
    out["seconds"] = time.perf_counter() - t0
    out["ok"] = bool(
        first_res <= 1e-10
        and first_min > 0
        and np.allclose(gamma_id, 0.5, atol=1e-14, rtol=0)
        and second_res <= 1e-12
        and second_min >= N0
        and out["families_ok"]
    )
    return out


def suite_mikado(seed: int = 0, eta: float | None = None, N: int = 64) -> dict:
    from .driver import RunConfig, _ingredients

    t0 = time.perf_counter()
    cfg = RunConfig() if eta is None else RunConfig(eta=eta)
    fams, shifts, profiles = _ingredients(cfg)
    moments_err = 0.0
    stationary = 0.0
    stationary_abs = 0.0
    fourier = 0.0
    for prof in profiles.values():
        m = check_moments(prof)
        moments_err = max(moments_err, max(m["errors"].values()))
        st = verify_stationary(prof)
        stationary = max(stationary, st["div_U_relative"])
        stationary_abs = max(stationary_abs, st["div_U"])
        fourier = max(fourier, st["fourier_div_U"], st["fourier_div_UU"])
    overlap = support_overlap_count(fams, shifts, cfg.eta / 10.0, N)
    dist = min_pair_distance(fams, shifts)
    out = {
        "profiles": len(profiles),
        "moment_error": moments_err,
        "directional_derivative_relative": stationary,
        "directional_derivative_absolute": stationary_abs,
        "fourier_directional": fourier,
        "overlap": overlap,
        "min_axis_distance": dist,
        "tube_diameter": 2 * cfg.eta / 10.0,
        "seconds": time.perf_counter() - t0,
    }
    out["ok"] = bool(moments_err <= 1e-8 and stationary <= 1e-10 and overlap["max_count"] <= 1 and dist >= 2 * cfg.eta / 10.0)
    return out


def one_mode_velocity(amplitude: float = 0.1, N: int = 16):
    """Divergence-free velocity built from the unit Fourier shell with a time modulation."""
    x = grid_points(N)
    base = amplitude * np.stack([np.sin(x[2]), np.sin(x[0]), np.sin(x[1])])
    return lambda t: base * math.cos(t)


def suite_flows(seed: int = 0, N: int = 16, amplitude: float = 0.1) -> dict:
    from .flows import backward_flow, determinant_3x3, forward_flow

    t0 = time.perf_counter()
    u = one_mode_velocity(amplitude, N)
    anchor, window = 0.0, (-0.5, 0.5)
    fm = backward_flow(u, anchor, window, N, dt=1.0 / 64)
    x = grid_points(N).reshape(3, -1)
    trip = 0.0
    det_dev = 0.0
    for t in np.linspace(window[0], window[1], 9):
        xi = fm.xi(t).reshape(3, -1)
        back = forward_flow(u, anchor, xi, t, steps=64)
        d = np.mod(back - x + np.pi, 2 * np.pi) - np.pi
        trip = max(trip, float(np.abs(d).max()))
        det_dev = max(det_dev, float(np.abs(determinant_3x3(fm.grad(t)) - 1.0).max()))
    # time refinement at the window end
    ends = []
    for dt in (1.0 / 4, 1.0 / 8, 1.0 / 16, 1.0 / 128):
        f = backward_flow(u, anchor, (anchor, 0.5), N, dt=dt, check=False)
        ends.append(np.asarray(f.disp(0.5)))
    errs = [float(np.abs(e - ends[-1]).max()) for e in ends[:-1]]
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:]) if b > 0]
    out = {
        "round_trip": trip,
        "det_deviation": det_dev,
        "refinement_errors": errs,
        "orders": orders,
        "seconds": time.perf_counter() - t0,
    }
    out["ok"] = bool(trip <= 1e-6 and det_dev <= 1e-6 and orders and min(orders) >= 3.0)
    return out


def suite_cancellation(state, seed: int = 0) -> dict:
    from .driver import iterate

    t0 = time.perf_counter()
    stage = iterate(state)
    t = 0.5 * state.schedule.horizon
    ctx = stage.ctx
    rep = cancellation_report(
        ctx.weights(t), np.asarray(ctx.R_l.value(t)), np.asarray(ctx.Phi_l.value(t)), np.asarray(ctx.S_l.value(t)),
        ctx.delta, ctx.moments, samples=100, seed=seed,
    )
    out = {"t": t, **rep, "seconds": time.perf_counter() - t0}
    out["ok"] = bool(max(rep["transport"], rep["cubic"], rep["quadratic"]) <= 1e-8)
    return out


def suite_residual(state, seed: int = 0) -> dict:
    from .driver import initial_checks

    t0 = time.perf_counter()
    if state.q == 0:
        out = initial_checks(state)
    else:
        tol = state.config.tolerances["residual"]
        rows = []
        for t in state.check_times():
            rows.append({"t": float(t), **state.residual(float(t)).relative()})
        out = {"rows": rows, "ok": all(max(r["mass"], r["momentum"], r["divergence"]) <= tol for r in rows)}
    out["seconds"] = time.perf_counter() - t0
    return out
