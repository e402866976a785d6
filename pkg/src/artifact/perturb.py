"""Principal perturbations, correctors and their Fourier-table representation.

The velocity perturbation is the curl of a band-limited potential

    V = lambda^{-1} sum_I theta_I chi_I(xi_I) a_I J_I^T Psi_I(lambda xi_I),

where ``Psi_I = sigma grad(Pi) x h_I`` is the compact stream field of the Mikado
profile (its curl is ``psi_I h_I``).  Then ``w = curl T[V]`` is divergence free
on the grid, ``w_0 = T[sum theta_I chi_I a_I J^{-1} h_I psi_I(lambda xi_I)]`` and
the corrector is ``w_c = w - w_0``.  The density perturbation is
``theta_0 = T[sum theta_I chi_I b_I phi_I(lambda xi_I)]`` with the mean
subtracted.  Products are formed pointwise and truncated once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import KINDS, primitive
from .mikado import MikadoProfile, shift_for
from .spectral_core import band_limit, curl_values, divergence_values, grid_points, truncate
from .weights import WeightSet, build_weight_set, outer6


WEIGHT_CACHE_SIZE = 2


class ResolutionError(ValueError):
    """Raised when the grid cannot represent the requested oscillation frequency."""


@dataclass
class StageContext:
    """Everything needed to evaluate the perturbation of one stage at any instant.

    Attributes
    ----------
    lam : frequency of the new stage
    delta : amplitude of the new stage
    lam_q : frequency of the current stage (enters the transport weights)
    flows : dict ``p -> FlowMap``
    R_l, Phi_l, S_l : lazy mollified errors (``TimeField``)
    flips : set of ``(p, kind)`` whose amplitudes change sign
    """

    N: int
    lam: float
    delta: float
    lam_q: float
    gamma: float
    N0: float
    mu_inv: int
    families: list
    profiles: dict
    shifts: dict
    temporal: object
    spatial: object
    flows: dict
    R_l: object
    Phi_l: object
    S_l: object
    flips: frozenset = frozenset()
    _class_cache: dict = field(default_factory=dict, repr=False)
    _weights: dict = field(default_factory=dict, repr=False)
    _evaluators: dict = field(default_factory=dict, repr=False)

    @property
    def moments(self) -> dict:
        out = {}
        for kind in KINDS:
            prof = next(p for (d, k), p in self.profiles.items() if k == kind)
            m = prof.moments
            out[kind] = {"psi2": m["psi2"], "psi_phi": m.get("psi_phi", 0.0), "psi2_phi": m.get("psi2_phi", 0.0)}
        return out

    def profile(self, h, kind: str) -> MikadoProfile:
        return self.profiles[(tuple(int(c) for c in primitive(h)), kind)]

    def weights(self, t: float) -> WeightSet:
        key = float(t)
        ws = self._weights.get(key)
        if ws is None:
            ws = build_weight_set(
                t,
                N=self.N,
                families=self.families,
                temporal=self.temporal,
                spatial=self.spatial,
                flows=self.flows,
                R_l=np.asarray(self.R_l.value(t)),
                Phi_l=np.asarray(self.Phi_l.value(t)),
                S_l=np.asarray(self.S_l.value(t)),
                lam_q=self.lam_q,
                gamma=self.gamma,
                delta=self.delta,
                N0=self.N0,
                psi2_means={k: v["psi2"] for k, v in self.moments.items()},
                flips=self.flips,
                class_cache=self._class_cache,
            )
            # a weight set at 64^3 holds a few hundred megabytes
            while len(self._weights) >= WEIGHT_CACHE_SIZE:
                self._weights.pop(next(iter(self._weights)))
            self._weights[key] = ws
        return ws

    def evaluator(self, prof: MikadoProfile) -> dict:
        key = (prof.h, prof.kind)
        ev = self._evaluators.get(key)
        if ev is None:
            pot = prof.potential
            ev = {"psi": prof.psi, "phi": prof.phi, "d1": pot.derivative(0), "d2": pot.derivative(1)}
            self._evaluators[key] = ev
        return ev

    def with_flips(self, flips) -> "StageContext":
        """Copy sharing every ingredient except the sign flips (and the weight cache)."""
        return StageContext(
            self.N, self.lam, self.delta, self.lam_q, self.gamma, self.N0, self.mu_inv, self.families,
            self.profiles, self.shifts, self.temporal, self.spatial, self.flows, self.R_l, self.Phi_l,
            self.S_l, frozenset(flips), self._class_cache, {}, self._evaluators,
        )


# ---------------------------------------------------------------------------
# resolution


def resolution_report(lam: float, N: int, tube_radius: float, tol: float = 1e-6) -> dict:
    """Compare the oscillation frequency with the retained band of the grid.

    The profiles' Fourier coefficients fall below ``tol`` (relative) only
    beyond ``|m| ~ log(1/tol)^2 / r`` for a tube of cross-section radius
    ``r``; the minimal grid keeps ``lambda * |m|`` inside the band.
    """
    band = band_limit(N)
    m_needed = int(math.ceil(math.log(1.0 / tol) ** 2 / max(tube_radius, 1e-300)))
    min_grid = 4 * int(math.ceil(lam * m_needed)) + 1
    return {
        "band": band,
        "lambda": lam,
        "lambda_resolved": bool(lam <= band),
        "modes_needed": m_needed,
        "minimal_grid": min_grid,
        "resolved": bool(N >= min_grid),
    }


def check_resolution(lam: float, N: int, tube_radius: float, strict: bool = True, tol: float = 1e-6) -> dict:
    rep = resolution_report(lam, N, tube_radius, tol)
    if strict and not rep["resolved"]:
        raise ResolutionError(
            f"frequency {lam} with tube radius {tube_radius:.3g} is not resolved on {N}^3; "
            f"a grid of at least {rep['minimal_grid']}^3 is required"
        )
    return rep


# ---------------------------------------------------------------------------
# pointwise wave evaluation


@dataclass
class RawWaves:
    """Untruncated grid sums at one instant."""

    w0: np.ndarray  # (3, N^3)
    theta0: np.ndarray  # (N^3,)
    potential: np.ndarray  # (3, N^3)
    wave_count: int
    points_inside: int


def _wave_terms(ctx: StageContext, ws: WeightSet, want=("w0", "theta0", "potential"), only=None):
    """Iterate over active waves yielding ``(cell, kind, j, inside points, values)``."""
    N = ctx.N
    pts_grid = grid_points(N).reshape(3, -1)
    for cell in ws.cells:
        fam = ctx.families[cell.cls]
        fm = ctx.flows[cell.p]
        if fm.is_identity:
            xi = pts_grid[:, cell.points]
        else:
            xi = np.array(fm.xi(ws.t)).reshape(3, -1)[:, cell.points]
        y = ctx.lam * xi
        for kind in KINDS:
            if only is not None and kind not in only:
                continue
            fw = cell.families[kind]
            cut = cell.cutoff(kind)
            for j, h in enumerate(fam.vectors(kind)):
                prof = ctx.profile(h, kind)
                z = shift_for(ctx.shifts, cell.p, cell.cls, kind, j)
                s1, s2 = prof.geometry.cross_coords_wrapped(y, z)
                inside = np.flatnonzero((np.abs(s1) < prof.core) & (np.abs(s2) < prof.core))
                if inside.size == 0:
                    continue
                ev = ctx.evaluator(prof)
                u1, u2 = s1[inside], s2[inside]
                out = {"amp_a": cut[inside] * fw.a[j][inside], "amp_b": cut[inside] * fw.b[j][inside]}
                if "w0" in want or "theta0" in want:
                    out["psi"] = ev["psi"](u1, u2)
                    out["phi"] = ev["phi"](u1, u2)
                    out["tilted"] = fw.tilted[j][:, inside]
                if "potential" in want:
                    g = prof.geometry.to_3d(ev["d1"](u1, u2), ev["d2"](u1, u2))
                    stream = np.cross(g, np.asarray(h, dtype=float)[:, None], axis=0)
                    if cell.J is None:
                        out["stream"] = stream
                    else:
                        out["stream"] = np.einsum("mlp,mp->lp", cell.J[:, :, inside], stream)
                yield cell, kind, j, inside, out


def raw_waves(ctx: StageContext, t: float) -> RawWaves:
    ws = ctx.weights(t)
    n3 = ctx.N**3
    w0 = np.zeros((3, n3))
    th = np.zeros(n3)
    V = np.zeros((3, n3))
    count = 0
    inside_total = 0
    for cell, kind, j, inside, v in _wave_terms(ctx, ws):
        idx = cell.points[inside]
        w0[:, idx] += v["amp_a"] * v["psi"] * v["tilted"]
        th[idx] += v["amp_b"] * v["phi"]
        V[:, idx] += v["amp_a"] * v["stream"] / ctx.lam
        count += 1
        inside_total += inside.size
    return RawWaves(w0, th, V, count, inside_total)


# ---------------------------------------------------------------------------
# assembled perturbation


@dataclass
class Perturbation:
    """Perturbation fields at one instant (grid values)."""

    t: float
    w0: np.ndarray
    wc: np.ndarray
    theta0: np.ndarray
    theta_c: float
    potential: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def w(self) -> np.ndarray:
        return self.w0 + self.wc

    @property
    def theta(self) -> np.ndarray:
        return self.theta0 + self.theta_c


def assemble_principal(ctx: StageContext, t: float, raw: RawWaves | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(w_0, theta_0)`` at ``t``: truncated pointwise sums over the active waves."""
    raw = raw_waves(ctx, t) if raw is None else raw
    N = ctx.N
    w0 = truncate(raw.w0.reshape(3, N, N, N))
    th0 = truncate(raw.theta0.reshape(1, N, N, N))[0]
    return w0, th0


def divergence_corrector(ctx: StageContext, t: float, raw: RawWaves | None = None) -> np.ndarray:
    """``w_c = curl T[V] - w_0``."""
    raw = raw_waves(ctx, t) if raw is None else raw
    N = ctx.N
    V = truncate(raw.potential.reshape(3, N, N, N))
    w0 = truncate(raw.w0.reshape(3, N, N, N))
    return curl_values(V) - w0


def mean_corrector(theta0: np.ndarray) -> float:
    """Constant making ``theta_0 + theta_c`` mean free."""
    return -float(np.mean(theta0))


def perturbation(ctx: StageContext, t: float) -> Perturbation:
    raw = raw_waves(ctx, t)
    N = ctx.N
    V = truncate(raw.potential.reshape(3, N, N, N))
    w0 = truncate(raw.w0.reshape(3, N, N, N))
    th0 = truncate(raw.theta0.reshape(1, N, N, N))[0]
    w = curl_values(V)
    pert = Perturbation(t, w0, w - w0, th0, mean_corrector(th0), V)
    pert.diagnostics = {
        "waves": raw.wave_count,
        "points_inside_tubes": raw.points_inside,
        "div_w": float(np.abs(divergence_values(w)).max()),
        "div_w0": float(np.abs(divergence_values(w0)).max()),
        "w_sup": float(np.abs(w).max()),
        "w0_sup": float(np.abs(w0).max()),
        "wc_sup": float(np.abs(w - w0).max()),
    }
    return pert


# ---------------------------------------------------------------------------
# Fourier-table representation


TABLES = ("phi", "psi", "psi2", "psi_phi", "psi2_phi")


@dataclass
class WaveSet:
    """Per-wave Fourier tables with the amplitudes they multiply, at one instant.

    ``entries`` holds one dict per active wave with keys ``p``, ``cls``,
    ``kind``, ``j``, ``points`` (flat grid indices), ``xi`` (``(3, P)``),
    ``tilted`` (``(3, P)``), the cutoff ``cut`` and weights ``a``, ``b``, and
    per table name the pair ``(m, coefficient)`` including the shift phase.
    """

    t: float
    lam: float
    delta: float
    M: int
    entries: list

    def coefficient(self, name: str, p: int, m) -> np.ndarray:
        """Grid field of one representation coefficient (``a``, ``b``, ``c``, ``d`` or ``e``) at ``(p, m)``."""
        raise_if = {"a", "b", "c", "d", "e"}
        if name not in raise_if:
            raise KeyError(name)
        m = tuple(int(v) for v in m)
        n3 = None
        out = None
        for e in self.entries:
            if e["p"] != p:
                continue
            val = _entry_coefficient(e, name, m, self.delta)
            if val is None:
                continue
            if out is None:
                n3 = e["n3"]
                out = np.zeros(val.shape[:-1] + (n3,), dtype=complex)
            out[..., e["points"]] += val
        return out

    def represent(self, name: str, sample: np.ndarray) -> np.ndarray:
        """Evaluate ``sum_{p,m} coefficient e^{i lambda m . xi_p}`` (times the amplitude power) at flat grid indices."""
        power = {"a": 0.5, "b": 0.5, "c": 1.0, "d": 1.0, "e": 1.5}[name]
        total = None
        for e in self.entries:
            pos = np.searchsorted(e["points"], sample)
            pos = np.minimum(pos, e["points"].size - 1)
            hit = e["points"][pos] == sample
            if not np.any(hit):
                continue
            loc = pos[hit]
            table = _TABLE_OF[name]
            ms, coef = e["tables"][table]
            phase = np.exp(1j * self.lam * (ms @ e["xi"][:, loc]))
            amp = _entry_amplitude(e, name, self.delta)
            series = (coef[:, None] * phase).sum(axis=0)
            if name in ("c", "d", "e"):
                ms0 = np.all(ms == 0, axis=1)
                series = series - coef[ms0].sum()
            val = amp[..., loc] * series
            if total is None:
                total = np.zeros(val.shape[:-1] + (sample.size,), dtype=complex)
            total[..., hit] += val
        if total is None:
            return None
        return self.delta**power * total


_TABLE_OF = {"a": "phi", "b": "psi", "c": "psi2", "d": "psi_phi", "e": "psi2_phi"}


def _entry_amplitude(e: dict, name: str, delta: float) -> np.ndarray:
    cut, a, b, ht = e["cut"], e["a"], e["b"], e["tilted"]
    if name == "a":
        return cut * delta**-0.5 * b
    if name == "b":
        return cut * delta**-0.5 * a * ht
    if name == "c":
        return cut**2 * delta**-1 * a * a * outer6(ht)
    if name == "d":
        return cut**2 * delta**-1 * a * b * ht
    return cut**3 * delta**-1.5 * a * a * b * outer6(ht)


def _entry_coefficient(e: dict, name: str, m: tuple, delta: float):
    ms, coef = e["tables"][_TABLE_OF[name]]
    hit = np.flatnonzero(np.all(ms == np.array(m), axis=1))
    if hit.size == 0:
        return None
    return _entry_amplitude(e, name, delta) * coef[hit[0]]


def wave_coefficients(ctx: StageContext, t: float, M: int) -> WaveSet:
    """Tables of every active wave at ``t`` truncated at ``max |n_i| <= M`` in the cross-section lattice."""
    ws = ctx.weights(t)
    pts_grid = grid_points(ctx.N).reshape(3, -1)
    entries = []
    table_cache: dict = {}
    for cell in ws.cells:
        fam = ctx.families[cell.cls]
        fm = ctx.flows[cell.p]
        xi = pts_grid[:, cell.points] if fm.is_identity else np.array(fm.xi(t)).reshape(3, -1)[:, cell.points]
        for kind in KINDS:
            fw = cell.families[kind]
            for j, h in enumerate(fam.vectors(kind)):
                prof = ctx.profile(h, kind)
                z = shift_for(ctx.shifts, cell.p, cell.cls, kind, j)
                tabs = {}
                for name in TABLES:
                    key = (prof.h, prof.kind, name, M)
                    if key not in table_cache:
                        table_cache[key] = prof.table(name, M)
                    ms, coef = table_cache[key]
                    tabs[name] = (ms, coef * np.exp(-1j * (ms @ z)))
                entries.append(
                    {
                        "p": cell.p,
                        "cls": cell.cls,
                        "kind": kind,
                        "j": j,
                        "points": cell.points,
                        "n3": ctx.N**3,
                        "xi": xi,
                        "tilted": fw.tilted[j],
                        "cut": cell.cutoff(kind),
                        "a": fw.a[j],
                        "b": fw.b[j],
                        "tables": tabs,
                    }
                )
    return WaveSet(t, ctx.lam, ctx.delta, M, entries)


def corrector_mode(amplitude: np.ndarray, grad_amplitude: np.ndarray, h, m, lam: float, y: np.ndarray, J=None) -> np.ndarray:
    """Velocity of one Fourier mode of one wave from the explicit corrector formula.

    Returns ``A J^{-1} h e^{i lam m.xi} + lam^{-1} grad(A) x (J^T (i m x h) / |m|^2) e^{i lam m.xi}``;
    this is the curl of ``lam^{-1} A J^T (i m x h)/|m|^2 e^{i lam m.xi}`` when ``m . h = 0``.
    """
    h = np.asarray(h, dtype=float)
    m = np.asarray(m, dtype=float)
    phase = np.exp(1j * lam * np.tensordot(m, y, axes=(0, 0)))
    vec = 1j * np.cross(m, h) / float(m @ m)
    if J is None:
        ht = h.reshape((3,) + (1,) * (amplitude.ndim))
        Jv = vec.reshape((3,) + (1,) * (amplitude.ndim))
    else:
        Jinv = np.moveaxis(np.linalg.inv(np.moveaxis(J, (0, 1), (-2, -1))), (-2, -1), (0, 1))
        ht = np.einsum("ij...,j->i...", Jinv, h)
        Jv = np.einsum("mi...,m->i...", J, vec)
    principal = amplitude * ht * phase
    corr = np.cross(grad_amplitude, Jv, axis=0) * phase / lam
    return principal + corr
