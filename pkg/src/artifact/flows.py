"""Backward and forward flow maps of a solenoidal velocity and mollification along trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.ndimage import map_coordinates

from .spectral_core import (
    TimeSampledField,
    divergence_values,
    grid_points,
    to_fourier,
    to_grid,
    vector_gradient_values,
    wavenumbers,
)
from .timefields import ChebyshevField, chebyshev_nodes

VelocityFn = Callable[[float], np.ndarray]


class FlowError(ValueError):
    """Raised when a flow map leaves its admissible regime."""


JACOBIAN_BOUND = 0.2
DET_TOL = 1e-6


def _two_thirds(values: np.ndarray) -> np.ndarray:
    # flows use the standard 2/3 de-aliasing of a single quadratic product
    N = values.shape[-1]
    k1, k2, k3 = wavenumbers(N)
    keep = (np.abs(k1) < N / 3) & (np.abs(k2) < N / 3) & (np.abs(k3) < N / 3)
    return to_grid(to_fourier(values) * keep, N)


def _transport_rhs(u: np.ndarray, D: np.ndarray) -> np.ndarray:
    # d_t D = -u - (u . grad) D for the periodic displacement D = xi - x
    J = vector_gradient_values(D)
    adv = np.einsum("jxyz,ijxyz->ixyz", u, J)
    return -u - _two_thirds(adv)


def jacobian_from_displacement(D: np.ndarray) -> np.ndarray:
    """``grad xi[m, l] = d_l xi^m`` with ``xi = x + D``."""
    J = vector_gradient_values(D)
    J = J + np.eye(3)[:, :, None, None, None]
    return J


def inverse_3x3(J: np.ndarray) -> np.ndarray:
    """Pointwise inverse of a ``(3, 3, ...)`` matrix field."""
    A = np.moveaxis(J, (0, 1), (-2, -1))
    return np.moveaxis(np.linalg.inv(A), (-2, -1), (0, 1))


def determinant_3x3(J: np.ndarray) -> np.ndarray:
    return np.linalg.det(np.moveaxis(J, (0, 1), (-2, -1)))


@dataclass
class FlowMap:
    """Backward flow ``xi_p`` with ``xi_p(t_p, x) = x`` on a window around ``t_p``.

    Either the identity (zero velocity) or a displacement sampled in time.
    """

    anchor: float
    window: tuple
    N: int
    displacement: TimeSampledField | None = None
    velocity: VelocityFn | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def is_identity(self) -> bool:
        return self.displacement is None

    def _check_time(self, t: float):
        lo, hi = self.window
        span = hi - lo
        if t < lo - 1e-9 * span or t > hi + 1e-9 * span:
            raise FlowError(f"time {t} outside the flow window [{lo}, {hi}]")

    def disp(self, t: float) -> np.ndarray:
        self._check_time(t)
        if self.is_identity:
            return np.zeros((3, self.N, self.N, self.N))
        if t == self.anchor:
            return np.zeros((3, self.N, self.N, self.N))
        return self.displacement.at(t)

    def xi(self, t: float) -> np.ndarray:
        return grid_points(self.N) + self.disp(t)

    def grad(self, t: float) -> np.ndarray:
        if self.is_identity:
            return np.broadcast_to(np.eye(3)[:, :, None, None, None], (3, 3, self.N, self.N, self.N))
        return jacobian_from_displacement(self.disp(t))

    def grad_inverse(self, t: float) -> np.ndarray:
        if self.is_identity:
            return self.grad(t)
        return inverse_3x3(self.grad(t))

    def check(self, t: float) -> dict:
        """Determinant and distance-to-identity of the Jacobian at ``t``."""
        J = self.grad(t)
        det = determinant_3x3(J)
        dev = np.abs(J - np.eye(3)[:, :, None, None, None]).sum(axis=1).max()
        return {"det_min": float(det.min()), "det_max": float(det.max()), "id_distance": float(dev)}


def backward_flow(
    u: VelocityFn | None,
    anchor: float,
    window: tuple,
    N: int,
    dt: float | None = None,
    zero: bool = False,
    check: bool = True,
) -> FlowMap:
    """Solve ``d_t xi + (u . grad) xi = 0``, ``xi(anchor) = x`` by classical RK4.

    Parameters
    ----------
    u : callable ``t -> (3, N, N, N)`` velocity values (divergence free).
    anchor : float
    window : (t0, t1) containing ``anchor``
    dt : float, optional
        Nominal step; the window halves are split into equal steps not exceeding it.
    zero : bool
        Declare the velocity identically zero (identity map without integration).
    """
    lo, hi = window
    if not (lo <= anchor <= hi):
        raise FlowError("anchor time must lie inside the window")
    if zero or u is None:
        return FlowMap(anchor, (lo, hi), N)
    u0 = u(anchor)
    div = np.abs(divergence_values(u0)).max()
    if div > 1e-10 * max(1.0, np.abs(u0).max()):
        raise FlowError(f"velocity is not divergence free (|div u| = {div:.2e})")
    umax = max(np.abs(u(t)).max() for t in (lo, anchor, hi))
    kmax = N / 3.0
    if dt is None:
        dt = (hi - lo) / 32.0
    cfl = dt * umax * kmax
    if cfl > 1.0:
        raise FlowError(f"CFL number {cfl:.2f} > 1; use a time step below {1.0 / (umax * kmax):.3e}")

    def integrate(t_end):
        n = max(1, int(math.ceil(abs(t_end - anchor) / dt - 1e-9)))
        h = (t_end - anchor) / n
        D = np.zeros((3, N, N, N))
        times, frames = [anchor], [D]
        t = anchor
        for _ in range(n):
            k1 = _transport_rhs(u(t), D)
            k2 = _transport_rhs(u(t + h / 2), D + h / 2 * k1)
            k3 = _transport_rhs(u(t + h / 2), D + h / 2 * k2)
            k4 = _transport_rhs(u(t + h), D + h * k3)
            D = D + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t = t + h
            times.append(t)
            frames.append(D)
        return times, frames

    tb, fb = integrate(lo) if lo < anchor else ([anchor], [np.zeros((3, N, N, N))])
    tf, ff = integrate(hi) if hi > anchor else ([anchor], [np.zeros((3, N, N, N))])
    times = tb[::-1] + tf[1:]
    frames = fb[::-1] + ff[1:]
    sampled = TimeSampledField("vector", np.array(times), np.stack(frames), order=5)
    fm = FlowMap(anchor, (lo, hi), N, sampled, u)
    if check:
        worst = {"det_min": 1.0, "det_max": 1.0, "id_distance": 0.0}
        for t in times:
            c = fm.check(t)
            worst = {
                "det_min": min(worst["det_min"], c["det_min"]),
                "det_max": max(worst["det_max"], c["det_max"]),
                "id_distance": max(worst["id_distance"], c["id_distance"]),
            }
        fm.diagnostics.update(worst)
        if worst["id_distance"] > JACOBIAN_BOUND:
            raise FlowError(f"|Id - grad xi| = {worst['id_distance']:.3f} exceeds {JACOBIAN_BOUND}: window too long")
        if worst["det_min"] < 1 - DET_TOL or worst["det_max"] > 1 + DET_TOL:
            raise FlowError(f"det grad xi left 1 +- {DET_TOL}: [{worst['det_min']}, {worst['det_max']}]")
    return fm


# ---------------------------------------------------------------------------
# evaluation of grid fields at arbitrary points


def sample_points(values: np.ndarray, points: np.ndarray, spectral_modes: int = 64) -> np.ndarray:
    """Evaluate periodic grid ``values`` ``(ncomp, N, N, N)`` at ``points`` ``(3, P)``.

    Few active Fourier modes are summed exactly; otherwise quintic spline
    interpolation with periodic wrap is used.
    """
    N = values.shape[-1]
    comps = values.reshape((-1, N, N, N))
    hat = np.fft.fftn(comps, axes=(-3, -2, -1)) / N**3
    active = np.argwhere(np.any(np.abs(hat) > 1e-14 * max(np.abs(hat).max(), 1e-300), axis=0))
    if len(active) <= spectral_modes:
        k = np.where(active > N // 2, active - N, active).astype(float)
        phase = np.exp(1j * (k @ points))
        coef = hat[:, active[:, 0], active[:, 1], active[:, 2]]
        return (coef @ phase).real
    idx = np.asarray(points) * (N / (2.0 * np.pi))
    return np.stack([map_coordinates(c, idx, order=5, mode="grid-wrap") for c in comps])


def forward_flow(u: VelocityFn | None, t0: float, points: np.ndarray, t1: float, steps: int = 16) -> np.ndarray:
    """``Xi(t1, x; t0)`` for ``x`` in ``points`` ``(3, P)`` by RK4 on the characteristics."""
    X = np.array(points, dtype=float)
    if u is None or t1 == t0:
        return X
    h = (t1 - t0) / steps
    t = t0
    for _ in range(steps):
        k1 = sample_points(u(t), X)
        k2 = sample_points(u(t + h / 2), X + h / 2 * k1)
        k3 = sample_points(u(t + h / 2), X + h / 2 * k2)
        k4 = sample_points(u(t + h), X + h * k3)
        X = X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return X


# ---------------------------------------------------------------------------
# mollification along trajectories


def _mollifier_raw(s):
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1
    return np.where(inside, np.exp(-1.0 / np.where(inside, 1 - s * s, 1.0)), 0.0)


def mollifier_rule(nodes: int = 24, panels: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Nodes ``s`` in ``(-1, 1)`` and weights ``w`` with ``sum w f(s) ~ int f omega``."""
    x, wt = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(-1, 1, panels + 1)
    s = np.concatenate([0.5 * (b - a) * x + 0.5 * (a + b) for a, b in zip(edges[:-1], edges[1:])])
    w = np.concatenate([0.5 * (b - a) * wt for a, b in zip(edges[:-1], edges[1:])])
    w = w * _mollifier_raw(s)
    return s, w / w.sum()


def mollifier(s) -> np.ndarray:
    """Normalized bump on ``(-1, 1)``."""
    return _mollifier_raw(s) / _mollifier_norm()


_NORM: list = []


def _mollifier_norm() -> float:
    if not _NORM:
        x, wt = np.polynomial.legendre.leggauss(64)
        edges = np.linspace(-1, 1, 17)
        tot = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            tot += np.sum(0.5 * (b - a) * wt * _mollifier_raw(0.5 * (b - a) * x + 0.5 * (a + b)))
        _NORM.append(float(tot))
    return _NORM[0]


def flow_mollify(
    F: Callable[[float], np.ndarray],
    u: VelocityFn | None,
    delta: float,
    t: float,
    domain: tuple | None = None,
    rule: tuple | None = None,
    steps: int = 8,
) -> np.ndarray:
    """``int F(t + s, Xi(t + s, x; t)) omega_delta(s) ds`` on the grid.

    Parameters
    ----------
    F : callable ``t -> (ncomp, N, N, N)``
    u : velocity callable or ``None`` for a zero velocity (pure time mollification).
    delta : mollification scale
    domain : (c, d), optional
        Interval on which ``F`` is defined; requires ``[t - delta, t + delta]`` inside.
    """
    if domain is not None:
        c, d = domain
        if t - delta < c or t + delta > d:
            raise FlowError(f"mollification at t={t} with scale {delta} leaves the domain [{c}, {d}]")
    s, w = mollifier_rule() if rule is None else rule
    out = None
    # characteristics are marched outward from t node by node, so each side
    # costs one pass; a gap of the full scale gets ``steps`` RK4 substeps
    trail: dict = {}
    for j in np.argsort(np.abs(s)):
        sj, wj = s[j], w[j]
        tj = t + delta * sj
        val = np.asarray(F(tj), dtype=float)
        if u is not None:
            side = sj >= 0
            if side not in trail:
                trail[side] = (t, grid_points(val.shape[-1]).reshape(3, -1))
            t_prev, X = trail[side]
            sub = max(1, int(np.ceil(steps * abs(tj - t_prev) / delta)))
            X = forward_flow(u, t_prev, X, tj, steps=sub)
            trail[side] = (tj, X)
            val = sample_points(val, X, spectral_modes=0).reshape(val.shape)
        out = wj * val if out is None else out + wj * val
    return out


def time_mollify(F, delta: float, interval: tuple, nodes: int = 16, op: Callable | None = None, rule: tuple | None = None):
    """Time mollification of a lazy field for a zero velocity, as a Chebyshev interpolant.

    ``op(F)`` is interpolated at ``nodes`` Chebyshev points of ``interval``
    widened by ``delta``; the mollifier acts on the interpolant exactly through
    the matrix of averaged Chebyshev polynomials, and the result is the
    interpolant of the mollified polynomial on ``interval``.  Polynomials keep
    their degree under convolution, so no further approximation is made.
    """
    a, b = float(interval[0]) - delta, float(interval[1]) + delta
    op = op or (lambda v: v)
    src = ChebyshevField.from_function(F.rank, F.N, lambda t: op(np.array(F.value(t))), (a, b), nodes)
    if src.is_zero:
        return src
    s, w = mollifier_rule() if rule is None else rule
    t_new = chebyshev_nodes(interval[0], interval[1], nodes)
    V = np.zeros((nodes, nodes))
    for sj, wj in zip(s, w):
        x = (2.0 * (t_new + delta * sj) - a - b) / (b - a)
        V += wj * np.polynomial.chebyshev.chebvander(x, nodes - 1)
    frames = np.tensordot(V, src.coef, axes=(1, 0))
    return ChebyshevField(F.rank, interval, frames)
