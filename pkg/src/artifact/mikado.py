"""Mikado profiles: tube geometry, moment-constrained profiles, Fourier tables, shifts.

A profile for a primitive integer direction ``h`` is a function of the
two-dimensional cross-section coordinates ``s = (s1, s2)`` of the nearest
image of a point onto the periodic line ``R h + 2 pi Z^3``.  Every profile is a
finite sum of separable products of one-dimensional bumps, so moments and
Fourier coefficients reduce to one-dimensional quadratures.
"""

from __future__ import annotations

import itertools
import json
from importlib import resources
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import KINDS, DirectionFamily, primitive
from .jets import Jet, flat_exp


class MikadoError(ValueError):
    """Raised for infeasible profiles or shift placements."""


# ---------------------------------------------------------------------------
# one-dimensional bump


def bump(x, order: int = 0) -> np.ndarray:
    """``d^order/dx^order exp(-1/(1-x^2))`` (zero for ``|x| >= 1``)."""
    x = np.asarray(x, dtype=float)
    j = Jet.variable(x, order)
    return flat_exp(1.0 - j * j).derivative(order)


@dataclass(frozen=True)
class Factor:
    """``B^(order)(s / radius)``."""

    radius: float
    order: int = 0

    def __call__(self, s):
        return bump(np.asarray(s) / self.radius, self.order)


def _eval_factors(factors, s):
    out = 1.0
    for f in factors:
        out = out * f(s)
    return out


def _support(factors) -> float:
    return min(f.radius for f in factors)


_GL_NODES = 32
_PANELS_PER_RADIUS = 8


def _gl_panels(breaks, k_max: float, min_width: float | None = None):
    nodes, weights = np.polynomial.legendre.leggauss(_GL_NODES)
    xs, ws = [], []
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        width = hi - lo
        nsub = max(1, int(math.ceil(width * k_max / (2.0 * math.pi) / 2.0)))
        if min_width:
            nsub = max(nsub, int(math.ceil(width / min_width - 1e-9)))
        edges = np.linspace(lo, hi, nsub + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            xs.append(0.5 * (b - a) * nodes + 0.5 * (a + b))
            ws.append(0.5 * (b - a) * weights)
    return np.concatenate(xs), np.concatenate(ws)


def _canonical(factors) -> tuple:
    return tuple(sorted(factors, key=lambda f: (f.radius, f.order)))


_INTEGRAL_CACHE: dict = {}


def _transform_1d(factors, k) -> np.ndarray:
    """``int f(s) exp(-i k s) ds`` for the product of ``factors``."""
    factors = _canonical(factors)
    k = np.atleast_1d(np.asarray(k, dtype=float))
    zero = k.size == 1 and k[0] == 0.0
    if zero and factors in _INTEGRAL_CACHE:
        return np.array([_INTEGRAL_CACHE[factors]], dtype=complex)
    r = _support(factors)
    inner = {f.radius for f in factors if f.radius < r}
    breaks = sorted({-r, 0.0, r} | {-x for x in inner} | inner)
    kmax = float(np.max(np.abs(k))) if k.size else 0.0
    s, w = _gl_panels(breaks, kmax, r / _PANELS_PER_RADIUS)
    f = _eval_factors(factors, s) * w
    if zero:
        val = complex(np.sum(f))
        _INTEGRAL_CACHE[factors] = val
        return np.array([val])
    return np.exp(-1j * np.outer(k, s)) @ f


# ---------------------------------------------------------------------------
# separable functions of the cross-section


@dataclass(frozen=True)
class Separable:
    """``sum_t c_t f_t(s1) g_t(s2)`` with ``f_t``, ``g_t`` products of bump factors."""

    terms: tuple = ()

    def __call__(self, s1, s2):
        out = 0.0
        for c, f, g in self.terms:
            out = out + c * _eval_factors(f, s1) * _eval_factors(g, s2)
        return out

    def __add__(self, other: "Separable") -> "Separable":
        return Separable(self.terms + other.terms)

    def __mul__(self, other):
        if isinstance(other, Separable):
            return Separable(
                tuple((c1 * c2, f1 + f2, g1 + g2) for c1, f1, g1 in self.terms for c2, f2, g2 in other.terms)
            )
        return Separable(tuple((other * c, f, g) for c, f, g in self.terms))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def derivative(self, axis: int) -> "Separable":
        out = []
        for c, f, g in self.terms:
            fac = f if axis == 0 else g
            for i, x in enumerate(fac):
                new = fac[:i] + (Factor(x.radius, x.order + 1),) + fac[i + 1 :]
                cc = c / x.radius
                out.append((cc, new, g) if axis == 0 else (cc, f, new))
        return Separable(tuple(out))

    def transform(self, k1, k2) -> np.ndarray:
        """``int int F(s) exp(-i k . s) ds`` at arrays ``k1``, ``k2``."""
        k1 = np.asarray(k1, dtype=float)
        k2 = np.asarray(k2, dtype=float)
        out = np.zeros(np.broadcast(k1, k2).shape, dtype=complex)
        # tables repeat each wavenumber many times; transform the distinct ones
        u1, i1 = np.unique(k1.ravel(), return_inverse=True)
        u2, i2 = np.unique(k2.ravel(), return_inverse=True)
        for c, f, g in self.terms:
            t1 = _transform_1d(f, u1)[i1].reshape(k1.shape)
            t2 = _transform_1d(g, u2)[i2].reshape(k2.shape)
            out = out + c * t1 * t2
        return out

    def integral(self) -> float:
        return float(self.transform(np.zeros(1), np.zeros(1)).real[0])

    @property
    def radius(self) -> float:
        return max(max(_support(f), _support(g)) for _, f, g in self.terms) if self.terms else 0.0


def _bump2(radius: float, o1: int = 0, o2: int = 0) -> Separable:
    return Separable(((1.0, (Factor(radius, o1),), (Factor(radius, o2),)),))


# ---------------------------------------------------------------------------
# tube geometry


def _reduce_basis(a: np.ndarray, b: np.ndarray):
    # Lagrange-Gauss reduction of a two-dimensional lattice basis
    a, b = a.astype(float), b.astype(float)
    if a @ a > b @ b:
        a, b = b, a
    while True:
        mu = round((a @ b) / (a @ a))
        b = b - mu * a
        if b @ b >= a @ a:
            return a, b
        a, b = b, a


@dataclass(frozen=True)
class TubeGeometry:
    """Cross-section coordinates for the periodic line through the origin along ``h``.

    Attributes
    ----------
    h : primitive integer direction
    a, b : integer basis of the lattice ``Z^3`` orthogonal to ``h``
    e1, e2 : orthonormal frame of the cross-section (``e2 = h_hat x e1``)
    """

    h: tuple

    def __post_init__(self):
        if tuple(primitive(self.h)) != tuple(self.h) or not any(self.h):
            raise MikadoError(f"direction {self.h} must be a nonzero primitive vector")

    @property
    def hvec(self) -> np.ndarray:
        return np.array(self.h, dtype=float)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.hvec))

    @property
    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        return _lattice_basis(self.h)

    @property
    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a, _ = self.basis
        hh = self.hvec / self.norm
        e1 = a / np.linalg.norm(a)
        # integer cross product keeps e2 exactly orthogonal to h in rounding
        c = np.cross(np.array(self.h), a)
        e2 = c / np.linalg.norm(c)
        return hh, e1, e2

    def _map(self):
        a, b = self.basis
        M = np.stack([a, b], axis=1).astype(float)
        G = M.T @ M
        return M, np.linalg.inv(G)

    def image_lattice(self) -> np.ndarray:
        """Reduced basis (columns, in frame coordinates) of the projected ``2 pi Z^3``."""
        M, Ginv = self._map()
        _, e1, e2 = self.frame
        E = np.stack([e1, e2])
        L = 2.0 * np.pi * (E @ M @ Ginv)
        u, v = _reduce_basis(L[:, 0], L[:, 1])
        return np.stack([u, v], axis=1)

    @property
    def min_image_distance(self) -> float:
        return float(np.linalg.norm(self.image_lattice()[:, 0]))

    def cross_coords_wrapped(self, y: np.ndarray, z=None):
        """Frame coordinates of the image selected by wrapping ``(a.y, b.y)`` into ``(-pi, pi]``.

        Exact for the nearest image whenever that image lies within
        ``pi / max(|a|, |b|)`` of the line.
        """
        a, b = self.basis
        y = np.asarray(y, dtype=float)
        if z is not None:
            y = y - np.asarray(z, dtype=float).reshape((3,) + (1,) * (y.ndim - 1))
        d1 = _wrap(np.tensordot(a, y, axes=(0, 0)))
        d2 = _wrap(np.tensordot(b, y, axes=(0, 0)))
        return self._coords_from_delta(d1, d2)

    def _coords_from_delta(self, d1, d2):
        M, Ginv = self._map()
        _, e1, e2 = self.frame
        P = np.stack([e1, e2]) @ M @ Ginv
        return P[0, 0] * d1 + P[0, 1] * d2, P[1, 0] * d1 + P[1, 1] * d2

    def cross_coords(self, y: np.ndarray, z=None):
        """Frame coordinates of the nearest image (Babai rounding plus neighbour search)."""
        s1, s2 = self.cross_coords_wrapped(y, z)
        L = self.image_lattice()
        Linv = np.linalg.inv(L)
        c = np.rint(Linv[0, 0] * s1 + Linv[0, 1] * s2), np.rint(Linv[1, 0] * s1 + Linv[1, 1] * s2)
        b1 = s1 - L[0, 0] * c[0] - L[0, 1] * c[1]
        b2 = s2 - L[1, 0] * c[0] - L[1, 1] * c[1]
        best1, best2 = b1, b2
        best = b1 * b1 + b2 * b2
        for i, j in itertools.product((-1, 0, 1), repeat=2):
            t1 = b1 - L[0, 0] * i - L[0, 1] * j
            t2 = b2 - L[1, 0] * i - L[1, 1] * j
            r = t1 * t1 + t2 * t2
            better = r < best
            best = np.where(better, r, best)
            best1 = np.where(better, t1, best1)
            best2 = np.where(better, t2, best2)
        return best1, best2

    def distance(self, y: np.ndarray, z=None) -> np.ndarray:
        s1, s2 = self.cross_coords(y, z)
        return np.sqrt(s1 * s1 + s2 * s2)

    def to_3d(self, s1, s2) -> np.ndarray:
        _, e1, e2 = self.frame
        return np.multiply.outer(e1, s1) + np.multiply.outer(e2, s2)


def _wrap(x):
    return x - 2.0 * np.pi * np.round(x / (2.0 * np.pi))


_BASIS_CACHE: dict = {}


def _lattice_basis(h) -> tuple[np.ndarray, np.ndarray]:
    h = tuple(int(c) for c in h)
    if h in _BASIS_CACHE:
        return _BASIS_CACHE[h]
    hv = np.array(h)
    bound = int(np.max(np.abs(hv))) + 1
    rng = range(-bound, bound + 1)
    cands = [np.array(v) for v in itertools.product(rng, repeat=3) if any(v) and np.dot(v, hv) == 0]
    cands.sort(key=lambda v: (int(v @ v), tuple(v)))
    hn2 = int(hv @ hv)
    for i, a in enumerate(cands):
        for b in cands[i + 1 :]:
            c = np.cross(a, b)
            if int(c @ c) == hn2:
                if np.dot(c, hv) < 0:
                    b = -b
                _BASIS_CACHE[h] = (a, b)
                return a, b
    raise MikadoError(f"no lattice basis found for {h}")


# ---------------------------------------------------------------------------
# profiles

DEFAULT_ETA = 0.025
DEFAULT_SEED = 0
DEFAULT_NORMALIZATION = {"R": 0.01, "Phi": 0.01, "S": 1.0}
MOMENT_TARGETS = {
    "R": {"phi": 0.0, "psi_phi": 1.0, "psi2_phi": 0.0},
    "Phi": {"phi": 0.0, "psi_phi": 0.0, "psi2_phi": 1.0},
}
TABLE_NAMES = ("psi", "phi", "psi2", "psi_phi", "psi2_phi")


@dataclass(frozen=True)
class MikadoProfile:
    """Profiles ``psi``, ``phi`` for one primitive direction and kind.

    ``psi = -sigma * Laplacian(Pi)`` for a product bump ``Pi`` of half-width
    ``core``; the stream potential is ``sigma * grad(Pi) x h`` so that its curl
    is ``psi h``.  ``phi`` is a combination of product bumps solving the
    kind's moment conditions.
    """

    h: tuple
    kind: str
    eta: float
    core: float
    sigma: float
    phi_radii: tuple
    phi_coeffs: tuple
    moments: dict = field(compare=False)

    @property
    def geometry(self) -> TubeGeometry:
        return TubeGeometry(tuple(self.h))

    @property
    def tube_radius(self) -> float:
        return self.eta / 10.0

    @property
    def potential(self) -> Separable:
        return self.sigma * _bump2(self.core)

    @property
    def psi(self) -> Separable:
        p = _bump2(self.core)
        return -self.sigma * (p.derivative(0).derivative(0) + p.derivative(1).derivative(1))

    @property
    def phi(self) -> Separable:
        out = Separable()
        for c, r in zip(self.phi_coeffs, self.phi_radii):
            out = out + c * _bump2(r)
        return out

    def table_function(self, name: str) -> Separable:
        psi, phi = self.psi, self.phi
        return {
            "psi": psi,
            "phi": phi,
            "psi2": psi * psi,
            "psi_phi": psi * phi,
            "psi2_phi": psi * psi * phi,
        }[name]

    # pointwise evaluation on 3-d points -----------------------------------

    def cross(self, y, z=None):
        return self.geometry.cross_coords_wrapped(y, z)

    def psi_at(self, y, z=None):
        return self.psi(*self.cross(y, z))

    def phi_at(self, y, z=None):
        return self.phi(*self.cross(y, z))

    def grad_psi_at(self, y, z=None) -> np.ndarray:
        s1, s2 = self.cross(y, z)
        psi = self.psi
        return self.geometry.to_3d(psi.derivative(0)(s1, s2), psi.derivative(1)(s1, s2))

    def stream_at(self, hvec, y, z=None) -> np.ndarray:
        """``sigma * grad(Pi) x hvec`` (its curl is ``psi * hvec`` for ``hvec`` parallel to ``h``)."""
        s1, s2 = self.cross(y, z)
        pot = self.potential
        g = self.geometry.to_3d(pot.derivative(0)(s1, s2), pot.derivative(1)(s1, s2))
        hv = np.asarray(hvec, dtype=float).reshape((3,) + (1,) * (g.ndim - 1))
        return np.cross(g, hv, axis=0)

    # Fourier tables ---------------------------------------------------------

    def modes(self, M: int):
        """Integer pairs ``n`` with ``max|n_i| <= M`` and the 3-d modes ``m = n1 a + n2 b``."""
        a, b = self.geometry.basis
        r = np.arange(-M, M + 1)
        n = np.stack(np.meshgrid(r, r, indexing="ij"), axis=-1).reshape(-1, 2)
        m = n[:, :1] * a[None] + n[:, 1:] * b[None]
        return n, m

    def table(self, name: str, M: int) -> tuple[np.ndarray, np.ndarray]:
        """``(m, coefficient)``: ``F(y) = sum_m coeff_m exp(i m . y)`` for the unshifted profile."""
        _, m = self.modes(M)
        _, e1, e2 = self.geometry.frame
        k1, k2 = m @ e1, m @ e2
        scale = self.geometry.norm / (2.0 * np.pi) ** 2
        return m, scale * self.table_function(name).transform(k1, k2)

    def sidecar(self, shift=None, M: int = 4, n0: int = 15) -> dict:
        decay = decay_report(self, M, n0)
        return {
            "direction": list(self.h),
            "kind": self.kind,
            "shift": None if shift is None else [float(c) for c in shift],
            "eta": self.eta,
            "core": self.core,
            "sigma": self.sigma,
            "phi_radii": list(self.phi_radii),
            "phi_coeffs": list(self.phi_coeffs),
            "moments": self.moments,
            "decay": decay,
        }


def mean_value(geom: TubeGeometry, f: Separable) -> float:
    """Torus average of a function of the cross-section."""
    return geom.norm / (2.0 * np.pi) ** 2 * f.integral()


def _mesh_2d(r: float, nodes: int = 48, panels: int = 16):
    s, w = _gl_custom(np.linspace(-r, r, 2 * panels + 1), nodes)
    S1, S2 = np.meshgrid(s, s, indexing="ij")
    return S1, S2, np.outer(w, w)


def mean_value_2d(geom: TubeGeometry, values: np.ndarray, weights: np.ndarray) -> float:
    """Torus average from values on a two-dimensional composite Gauss-Legendre mesh."""
    return geom.norm / (2.0 * np.pi) ** 2 * float(np.sum(weights * values))


def _gl_custom(breaks, nodes):
    x, wt = np.polynomial.legendre.leggauss(nodes)
    xs, ws = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        xs.append(0.5 * (b - a) * x + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * wt)
    return np.concatenate(xs), np.concatenate(ws)


def build_profile(h, kind: str, eta: float, normalization: float | None = None, n_radii: int = 6, cap: int = 12) -> MikadoProfile:
    """Profile for primitive direction ``h`` and kind ``R``, ``Phi`` or ``S``.

    Parameters
    ----------
    normalization : float, optional
        Target for the average of ``psi^2``; defaults per kind.
    n_radii : int
        Initial number of bump radii for ``phi``; grown up to ``cap`` when the
        moment system is rank deficient.
    """
    if kind not in KINDS:
        raise MikadoError(f"unknown kind {kind!r}")
    h = tuple(int(c) for c in primitive(h))
    geom = TubeGeometry(h)
    rt = eta / 10.0
    a, b = geom.basis
    if rt * max(np.linalg.norm(a), np.linalg.norm(b)) >= np.pi / 2 or 2 * rt >= geom.min_image_distance / 2:
        raise MikadoError(f"tube radius {rt:.3g} too large for direction {h}")
    core = rt / math.sqrt(2.0)
    P = DEFAULT_NORMALIZATION[kind] if normalization is None else float(normalization)
    p = _bump2(core)
    psi_unit = -(p.derivative(0).derivative(0) + p.derivative(1).derivative(1))
    sigma1 = math.sqrt(1.0 / mean_value(geom, psi_unit * psi_unit))
    sigma = sigma1 * math.sqrt(P)
    # moments are solved against the unit-normalized psi; the right-hand side absorbs the scale
    psi = sigma1 * psi_unit
    if kind == "S":
        radii, coeffs = (), ()
    else:
        targets = MOMENT_TARGETS[kind]
        s = math.sqrt(P)
        rhs = np.array([targets["phi"], targets["psi_phi"] / s, targets["psi2_phi"] / (s * s)])
        n = n_radii
        while True:
            radii = tuple(np.linspace(core / 2.0, core, n))
            A = np.array(
                [
                    [mean_value(geom, _bump2(r)) for r in radii],
                    [mean_value(geom, psi * _bump2(r)) for r in radii],
                    [mean_value(geom, psi * psi * _bump2(r)) for r in radii],
                ]
            )
            coeffs, *_ = np.linalg.lstsq(A, rhs, rcond=None)
            if np.linalg.matrix_rank(A) == 3 and np.abs(A @ coeffs - rhs).max() < 1e-12 * max(1.0, np.abs(rhs).max()):
                break
            n += 2
            if n > cap:
                raise MikadoError(f"moment system infeasible for {h}, kind {kind}, with {cap} radii")
        coeffs = tuple(float(c) for c in coeffs)
    prof = MikadoProfile(h, kind, float(eta), core, sigma, tuple(float(r) for r in radii), coeffs, {})
    prof.moments.update(profile_moments(prof))
    return prof


def profile_moments(prof: MikadoProfile, two_d: bool = False) -> dict:
    """Averages of ``psi``, ``psi^2`` and the ``phi`` moments.

    The default route integrates the expanded separable products with
    one-dimensional rules; ``two_d`` instead samples ``psi`` and ``phi`` on a
    two-dimensional mesh and multiplies pointwise.
    """
    geom = prof.geometry
    if two_d:
        S1, S2, W = _mesh_2d(prof.core)
        psi = prof.psi(S1, S2)
        phi = prof.phi(S1, S2) if prof.phi_coeffs else None
        avg = lambda v: mean_value_2d(geom, v, W)
        out = {"psi": avg(psi), "psi2": avg(psi * psi)}
        if phi is not None:
            out.update({"phi": avg(phi), "psi_phi": avg(psi * phi), "psi2_phi": avg(psi * psi * phi)})
        return out
    out = {"psi": mean_value(geom, prof.psi), "psi2": mean_value(geom, prof.psi * prof.psi)}
    if prof.phi_coeffs:
        out.update(
            {
                "phi": mean_value(geom, prof.phi),
                "psi_phi": mean_value(geom, prof.psi * prof.phi),
                "psi2_phi": mean_value(geom, prof.psi * prof.psi * prof.phi),
            }
        )
    return out


def check_moments(prof: MikadoProfile, tol: float = 1e-8) -> dict:
    """Compare the kind's required moments with their values."""
    m = profile_moments(prof)
    want = {"psi": 0.0, "psi2": DEFAULT_NORMALIZATION[prof.kind] if prof.kind == "S" else None}
    if prof.kind in MOMENT_TARGETS:
        want.update(MOMENT_TARGETS[prof.kind])
    errs = {k: abs(m[k] - v) for k, v in want.items() if v is not None}
    return {"values": m, "errors": errs, "ok": all(e <= tol for e in errs.values())}


def decay_report(prof: MikadoProfile, M: int, n0: int) -> dict:
    """Weighted coefficient sums ``sum_m |m|^(n0+2) |coeff_m|`` over ``max|n_i| <= M``."""
    out = {}
    total = 0.0
    for name in TABLE_NAMES:
        if name != "psi" and name != "psi2" and not prof.phi_coeffs:
            continue
        m, c = prof.table(name, M)
        w = np.linalg.norm(m, axis=1) ** (n0 + 2)
        val = float(np.sum(w * np.abs(c)))
        out[name] = val
        total += val
    out["total"] = total
    out["truncation"] = M
    return out


def verify_stationary(prof: MikadoProfile, hvec=None, y: np.ndarray | None = None, M: int = 3) -> dict:
    """Divergence of ``U = psi h`` and of ``U (x) U`` on sample points and in Fourier space.

    The pointwise values use the analytic gradient: ``div U = h . grad psi``
    and ``div(U (x) U) = psi (h . grad psi) h``.  The Fourier values are
    ``(m . h)`` times the tabulated coefficients of ``psi`` and ``psi^2``.
    """
    h = np.array(prof.h if hvec is None else hvec, dtype=float)
    if y is None:
        rng = np.random.default_rng(0)
        y = rng.uniform(0, 2 * np.pi, size=(3, 4096))
        # half the samples inside the tube
        s = rng.uniform(-prof.core, prof.core, size=(2, 2048))
        y[:, :2048] = prof.geometry.to_3d(s[0], s[1]) + np.outer(prof.geometry.hvec, rng.uniform(0, 1, 2048))
    g = prof.grad_psi_at(y)
    div_u = np.tensordot(h, g, axes=(0, 0))
    psi = prof.psi_at(y)
    div_uu = np.abs(psi * div_u)[None] * np.abs(h)[:, None]
    m, a = prof.table("psi", M)
    _, c = prof.table("psi2", M)
    spec_u = np.abs((m @ h) * a).max()
    spec_uu = np.abs((m @ h) * c).max() * np.abs(h).max()
    scale = max(np.abs(g).max() * np.linalg.norm(h), 1e-300)
    return {
        "div_U": float(np.abs(div_u).max()),
        "div_UU": float(div_uu.max()),
        "div_U_relative": float(np.abs(div_u).max() / scale),
        "fourier_div_U": float(spec_u),
        "fourier_div_UU": float(spec_uu),
        "samples_inside": int(np.count_nonzero(psi)),
    }


# ---------------------------------------------------------------------------
# shift placement


@dataclass(frozen=True)
class Tube:
    key: tuple
    h: tuple
    shift: np.ndarray


def wave_keys(families) -> list[tuple]:
    """``(parity, class index, kind, j)`` for every wave direction that can be active."""
    keys = []
    for parity in (0, 1):
        for ci, fam in enumerate(families):
            for kind in KINDS:
                for j in range(len(fam.vectors(kind))):
                    keys.append((parity, ci, kind, j))
    return keys


def _direction(families, key) -> tuple:
    _, ci, kind, j = key
    return tuple(int(c) for c in primitive(families[ci].vectors(kind)[j]))


def _pair_data(h1, h2):
    g = np.cross(h1, h2)
    gn = float(np.linalg.norm(g))
    c = int(np.gcd.reduce(np.abs(g)))
    return g / gn, 2.0 * np.pi * c / gn


def tube_distance(h1, z1, h2, z2) -> float:
    """Distance between the periodic lines ``z1 + R h1`` and ``z2 + R h2`` on the torus."""
    h1 = np.asarray(primitive(h1))
    h2 = np.asarray(primitive(h2))
    z = np.asarray(z1, dtype=float) - np.asarray(z2, dtype=float)
    if not np.any(np.cross(h1, h2)):
        return float(TubeGeometry(tuple(h2)).distance(z.reshape(3, 1))[0])
    nu, spacing = _pair_data(h1, h2)
    r = np.mod(z @ nu, spacing)
    return float(min(r, spacing - r))


def choose_shifts(families, tube_radius: float, seed: int = 0, candidates: int = 65536, margin: float = 1e-9) -> dict:
    """Greedy placement of pairwise disjoint tubes for every wave key.

    Candidate shifts are ``candidates`` seeded uniform points of the torus.  One
    feasibility mask per direction is updated after every placement, and each
    wave takes the first feasible candidate in a seeded random order.

    Returns ``{key: shift}``; raises ``MikadoError`` naming the wave that could
    not be placed.
    """
    rng = np.random.default_rng(seed)
    keys = wave_keys(families)
    keys.sort(key=lambda k: (k[2] != "S", k[3], k[1], k[0]))
    dirs = {k: _direction(families, k) for k in keys}
    unique = sorted(set(dirs.values()))
    cand = rng.uniform(0.0, 2.0 * np.pi, size=(candidates, 3))
    need = 2.0 * tube_radius + margin
    geoms = {d: TubeGeometry(d) for d in unique}
    for d, geom in geoms.items():
        a, b = geom.basis
        if need * max(np.linalg.norm(a), np.linalg.norm(b)) >= np.pi:
            raise MikadoError(f"tube radius {tube_radius:.4g} too large for direction {d}")
    masks = {d: np.ones(len(cand), dtype=bool) for d in unique}
    out = {}
    for key in keys:
        d = dirs[key]
        idx = np.flatnonzero(masks[d])
        if idx.size == 0:
            raise MikadoError(f"no feasible shift for wave {key} (direction {d}) at tube radius {tube_radius:.4g}")
        z = cand[idx[0]]
        out[key] = z
        hz = np.array(d)
        for e in unique:
            live = np.flatnonzero(masks[e])
            if live.size == 0:
                continue
            he = np.array(e)
            if np.any(np.cross(hz, he)):
                nu, sp = _pair_data(he, hz)
                r = np.mod((cand[live] - z) @ nu, sp)
                ok = np.minimum(r, sp - r) >= need
            else:
                s1, s2 = geoms[e].cross_coords_wrapped((cand[live] - z).T)
                ok = s1 * s1 + s2 * s2 >= need * need
            masks[e][live[~ok]] = False
    return out


def shift_for(shifts: dict, p: int, cls, kind: str, j: int) -> np.ndarray:
    """Shift of the wave ``(p, k, h)``: depends on ``p`` only through parity and on ``k`` through its class."""
    ci = cls if isinstance(cls, (int, np.integer)) else int(cls[0]) * 9 + int(cls[1]) * 3 + int(cls[2])
    return shifts[(p % 2, ci, kind, j)]


def support_overlap_count(families, shifts: dict, tube_radius: float, N: int = 64) -> dict:
    """Count tube supports (square cross-sections of half-width ``r / sqrt 2``) at every grid point."""
    x = 2.0 * np.pi * np.arange(N) / N
    y = np.stack(np.meshgrid(x, x, x, indexing="ij"))
    count = np.zeros((N, N, N), dtype=np.int32)
    half = tube_radius / math.sqrt(2.0)
    geoms: dict = {}
    deltas: dict = {}
    for key, z in shifts.items():
        d = _direction(families, key)
        geom = geoms.setdefault(d, TubeGeometry(d))
        if d not in deltas:
            a, b = geom.basis
            deltas[d] = (np.tensordot(a, y, axes=(0, 0)), np.tensordot(b, y, axes=(0, 0)))
        a, b = geom.basis
        d1 = _wrap(deltas[d][0] - a @ z)
        d2 = _wrap(deltas[d][1] - b @ z)
        s1, s2 = geom._coords_from_delta(d1, d2)
        count += ((np.abs(s1) < half) & (np.abs(s2) < half)).astype(np.int32)
    return {"max_count": int(count.max()), "covered_points": int(np.count_nonzero(count)), "grid": N}


def min_pair_distance(families, shifts: dict) -> float:
    """Smallest distance between the axes of any two placed tubes."""
    groups: dict = {}
    for k, z in shifts.items():
        groups.setdefault(_direction(families, k), []).append(z)
    groups = {d: np.array(v) for d, v in groups.items()}
    dirs = sorted(groups)
    best = math.inf
    for i, d1 in enumerate(dirs):
        for d2 in dirs[i:]:
            Z1, Z2 = groups[d1], groups[d2]
            diff = (Z1[:, None, :] - Z2[None, :, :]).reshape(-1, 3)
            if d1 == d2:
                iu = np.triu_indices(len(Z1), 1)
                diff = (Z1[iu[0]] - Z1[iu[1]])
                if diff.size == 0:
                    continue
                best = min(best, float(TubeGeometry(d1).distance(diff.T).min()))
            else:
                nu, sp = _pair_data(np.array(d1), np.array(d2))
                r = np.mod(diff @ nu, sp)
                best = min(best, float(np.minimum(r, sp - r).min()))
    return best


def bisect_eta(families, lo: float = 0.01, hi: float = 1.0, iters: int = 12, seed: int = 0) -> float:
    """Largest ``eta`` (tube radius ``eta / 10``) for which ``choose_shifts`` succeeds."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        try:
            choose_shifts(families, mid / 10.0, seed=seed)
            lo = mid
        except MikadoError:
            hi = mid
    return lo


def shifts_to_json(shifts: dict) -> str:
    return json.dumps([{"key": list(k), "shift": [float(c) for c in z]} for k, z in shifts.items()])


def shifts_from_json(text: str) -> dict:
    return {tuple(d["key"]): np.array(d["shift"]) for d in json.loads(text)}


def default_shifts(families=None, eta: float = DEFAULT_ETA, seed: int = DEFAULT_SEED) -> dict:
    """Shifts for the default families, read from the bundled table when the inputs match it."""
    if families is None and eta == DEFAULT_ETA and seed == DEFAULT_SEED:
        text = resources.files("artifact").joinpath("data/shifts_default.json").read_text()
        return shifts_from_json(text)
    from .geometry import default_direction_families

    return choose_shifts(families or default_direction_families(), eta / 10.0, seed=seed)


def build_profiles(families, eta: float) -> dict:
    """One profile per primitive direction and kind, keyed ``(direction, kind)``."""
    out = {}
    for fam in families:
        for kind in KINDS:
            for h in fam.vectors(kind):
                key = (tuple(int(c) for c in primitive(h)), kind)
                if key not in out:
                    out[key] = build_profile(key[0], kind, eta)
    return out
