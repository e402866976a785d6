"""Amplitude weights of the three wave families.

All solves are pointwise.  Points carry the Jacobian ``J[m, l] = d_l xi^m`` of
the backward flow and the mollified errors at that point; tilted directions are
``J^{-1} h``.  Symmetric matrices use the six-component storage of
``spectral_core``.

* cubic family: ``a = b = delta^{1/2} c^{1/3}`` where ``sum_h c_h h (x) h = Id + delta^{-3/2} M``
  and ``M = delta^{3/2} (J J^T - Id) - J Phi J^T``;
* transport family: ``a = b = lambda^{-gamma} delta^{1/2} c^{1/2}`` where
  ``sum_h c_h h = lambda^{2 gamma} delta^{-1} J R`` with every ``c_h >= N0``;
* quadratic family: ``a = delta^{1/2} c^{1/2}``, ``b = 0`` where
  ``sum_h c_h h (x) h = Id + delta^{-1} N`` and
  ``N = delta (J J^T - Id) - J (S + W) J^T`` with ``W`` the low-frequency
  quadratic contribution of the other two families.

The linear coefficients ``c_h`` are stored as ``Gamma``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, first_coefficients, gamma_second, sym_basis
from .spectral_core import PAIR_INDEX, TENSOR_PAIRS


class WeightError(ValueError):
    """Raised when a weight solve leaves the admissible range of its decomposition."""


# ---------------------------------------------------------------------------
# small pointwise matrix helpers (matrices stored as (3, 3, P))


def _identity(P: int) -> np.ndarray:
    return np.broadcast_to(np.eye(3)[:, :, None], (3, 3, P))


def sym6_to_mat(s: np.ndarray) -> np.ndarray:
    return s[PAIR_INDEX]


def mat_to_sym6(m: np.ndarray) -> np.ndarray:
    return np.stack([0.5 * (m[i, j] + m[j, i]) for i, j in TENSOR_PAIRS])


def conjugate(J: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``J S J^T`` for ``S`` in six-component storage; returns six components."""
    m = np.einsum("ikp,klp,jlp->ijp", J, sym6_to_mat(S), J)
    return mat_to_sym6(m)


def gram(J: np.ndarray) -> np.ndarray:
    """``J J^T`` in six-component storage."""
    return mat_to_sym6(np.einsum("ikp,jkp->ijp", J, J))


def pointwise_inverse(J: np.ndarray) -> np.ndarray:
    return np.moveaxis(np.linalg.inv(np.moveaxis(J, -1, 0)), 0, -1)


def tilted(Jinv: np.ndarray, h) -> np.ndarray:
    """``J^{-1} h`` at every point; shape ``(3, P)``."""
    return np.einsum("ijp,j->ip", Jinv, np.asarray(h, dtype=float))


def outer6(v: np.ndarray) -> np.ndarray:
    return np.stack([v[i] * v[j] for i, j in TENSOR_PAIRS])


_ID6 = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])


def _worst(points: np.ndarray, where: int) -> str:
    return f"point index {int(points[where])}" if points is not None else f"sample {where}"


def _solve_first(family6, A6: np.ndarray, what: str, points=None) -> np.ndarray:
    try:
        return first_coefficients(family6, A6, check=True)
    except GeometryError:
        c = first_coefficients(family6, A6, check=False)
        col = int(np.argmin(c.min(axis=0)))
        raise WeightError(
            f"{what}: argument outside the positivity range at {_worst(points, col)} "
            f"(smallest coefficient {c[:, col].min():.3e})"
        ) from None


# ---------------------------------------------------------------------------
# family solves


@dataclass
class FamilyWeights:
    """Weights of one family at a set of points (``(n_directions, P)`` arrays)."""

    kind: str
    vectors: np.ndarray
    a: np.ndarray
    b: np.ndarray
    Gamma: np.ndarray
    tilted: np.ndarray  # (n_directions, 3, P)
    matrix: np.ndarray | None = None  # the M or N argument, six components


def _tilt_all(vectors, J, P: int):
    Jinv = _identity(P) if J is None else pointwise_inverse(J)
    return np.stack([tilted(Jinv, h) for h in vectors])


def cubic_weights(Phi: np.ndarray, J: np.ndarray | None, family6, delta: float, points=None) -> FamilyWeights:
    """Weights of the cubic family from the mollified current ``Phi`` (six components, ``(6, P)``)."""
    Phi = np.asarray(Phi, dtype=float)
    P = Phi.shape[-1]
    Jm = _identity(P) if J is None else J
    M = delta**1.5 * (gram(Jm) - _ID6[:, None]) - conjugate(Jm, Phi)
    A = _ID6[:, None] + delta**-1.5 * M
    c = _solve_first(family6, A, "cubic weights", points)
    a = np.sqrt(delta) * np.cbrt(c)
    return FamilyWeights("Phi", np.asarray(family6), a, a.copy(), c, _tilt_all(family6, J, P), M)


def transport_weights(
    R: np.ndarray, J: np.ndarray | None, family4, lam: float, gamma: float, delta: float, N0: float, points=None
) -> FamilyWeights:
    """Weights of the transport family from the mollified flux ``R`` (``(3, P)``)."""
    R = np.asarray(R, dtype=float)
    P = R.shape[-1]
    Jm = _identity(P) if J is None else J
    arg = lam ** (2 * gamma) / delta * np.einsum("ijp,jp->ip", Jm, R)
    size = np.sqrt(np.sum(arg * arg, axis=0))
    if size.size and size.max() > N0 * (1 + 1e-12):
        col = int(np.argmax(size))
        raise WeightError(
            f"transport weights: |argument| = {size[col]:.3e} exceeds the ball radius {N0:.3e} at {_worst(points, col)}"
        )
    c = gamma_second(family4, arg, N0, check=False)
    a = lam ** (-gamma) * np.sqrt(delta) * np.sqrt(c)
    return FamilyWeights("R", np.asarray(family4), a, a.copy(), c, _tilt_all(family4, J, P), arg)


def quadratic_weights(
    S: np.ndarray, W: np.ndarray, J: np.ndarray | None, family6, delta: float, points=None
) -> FamilyWeights:
    """Weights of the quadratic family from ``S`` and the other families' contribution ``W``."""
    S = np.asarray(S, dtype=float)
    P = S.shape[-1]
    Jm = _identity(P) if J is None else J
    Nmat = delta * (gram(Jm) - _ID6[:, None]) - conjugate(Jm, S + W)
    A = _ID6[:, None] + Nmat / delta
    c = _solve_first(family6, A, "quadratic weights", points)
    a = np.sqrt(delta) * np.sqrt(c)
    return FamilyWeights("S", np.asarray(family6), a, np.zeros_like(a), c, _tilt_all(family6, J, P), Nmat)


def prior_contribution(fw: FamilyWeights, cut2: np.ndarray, psi2_mean: float) -> np.ndarray:
    """``sum_h cut2 a_h^2 <psi^2> tilde h (x) tilde h`` for one family (six components)."""
    out = 0.0
    for k in range(fw.a.shape[0]):
        out = out + cut2 * fw.a[k] ** 2 * psi2_mean * outer6(fw.tilted[k])
    return out


# ---------------------------------------------------------------------------
# cancellation identities (pointwise, one partition cell)


def cubic_identity_residual(fw: FamilyWeights, Phi: np.ndarray, delta: float, moment: float = 1.0) -> float:
    """``max |sum a^2 b <psi^2 phi> tilde h (x) tilde h - (delta^{3/2} Id - Phi)|`` relative to ``delta^{3/2}``."""
    lhs = sum(fw.a[k] ** 2 * fw.b[k] * moment * outer6(fw.tilted[k]) for k in range(fw.a.shape[0]))
    rhs = delta**1.5 * _ID6[:, None] - Phi
    return float(np.abs(lhs - rhs).max() / delta**1.5)


def transport_identity_residual(fw: FamilyWeights, R: np.ndarray, moment: float = 1.0) -> float:
    """``max |sum a b <psi phi> tilde h - R|`` relative to ``max(|R|, |sum a b h|)``."""
    lhs = sum(fw.a[k] * fw.b[k] * moment * fw.tilted[k] for k in range(fw.a.shape[0]))
    scale = max(float(np.abs(R).max()), float(np.abs(fw.a * fw.b).max()), 1e-300)
    return float(np.abs(lhs - R).max() / scale)


def quadratic_identity_residual(fw: FamilyWeights, S: np.ndarray, W: np.ndarray, delta: float, moment: float = 1.0) -> float:
    """``max |sum a^2 <psi^2> tilde h (x) tilde h + W - (delta Id - S)|`` relative to ``delta``."""
    lhs = sum(fw.a[k] ** 2 * moment * outer6(fw.tilted[k]) for k in range(fw.a.shape[0])) + W
    rhs = delta * _ID6[:, None] - S
    return float(np.abs(lhs - rhs).max() / delta)


# ---------------------------------------------------------------------------
# weights of all active waves at one instant


@dataclass
class CellWeights:
    """Weights of the waves living in one (time index, spatial class) cell at one instant."""

    p: int
    cls: int
    points: np.ndarray  # flat grid indices where the composed spatial cutoff is positive
    theta: float  # temporal generator value theta_p(t)
    chi: np.ndarray  # class cutoff at xi_p(t, x) on the points
    J: np.ndarray | None
    families: dict = field(default_factory=dict)  # kind -> FamilyWeights

    def cutoff(self, kind: str) -> np.ndarray:
        """``theta_I chi_I(xi_I)`` at the points (cubes for R and S, squares for Phi)."""
        power = 2 if kind == "Phi" else 3
        return (self.theta * self.chi) ** power


@dataclass
class WeightSet:
    """All cell weights at time ``t`` plus the global low-frequency field ``W``."""

    t: float
    N: int
    cells: list
    W: np.ndarray  # (6, N^3) contribution of the transport and cubic families
    flips: frozenset = frozenset()

    def cell(self, p: int, cls: int) -> CellWeights:
        for c in self.cells:
            if c.p == p and c.cls == cls:
                return c
        raise KeyError((p, cls))


def class_cutoffs(spatial, x: np.ndarray) -> dict:
    """All 27 class cutoffs at points ``x`` of shape ``(3, ...)``, keyed by class index."""
    per_axis = []
    for a in range(3):
        res = [0.0, 0.0, 0.0]
        for idx, v in spatial._axis_members(x[a]):
            for r in range(3):
                res[r] = res[r] + np.where(idx % 3 == r, v, 0.0)
        per_axis.append(res)
    out = {}
    for c0 in range(3):
        for c1 in range(3):
            for c2 in range(3):
                out[c0 * 9 + c1 * 3 + c2] = per_axis[0][c0] * per_axis[1][c1] * per_axis[2][c2]
    return out


def build_weight_set(
    t: float,
    *,
    N: int,
    families,
    temporal,
    spatial,
    flows: dict,
    R_l: np.ndarray,
    Phi_l: np.ndarray,
    S_l: np.ndarray,
    lam_q: float,
    gamma: float,
    delta: float,
    N0: float,
    psi2_means: dict,
    flips: frozenset = frozenset(),
    class_cache: dict | None = None,
) -> WeightSet:
    """Weights of every wave active at ``t``.

    Parameters
    ----------
    flows : dict ``p -> FlowMap``
    R_l, Phi_l, S_l : grid values at ``t`` (``(3|6, N, N, N)``)
    psi2_means : dict ``kind -> <psi^2>`` of the built profiles
    flips : set of ``(p, kind)`` whose ``a`` changes sign
    class_cache : dict reused across calls for identity flows
    """
    R_flat = R_l.reshape(3, -1)
    Phi_flat = Phi_l.reshape(6, -1)
    S_flat = S_l.reshape(6, -1)
    cells: list[CellWeights] = []
    W = np.zeros((6, N**3))
    for p in temporal.active(t):
        th = float(temporal(p, t))
        fm = flows[p]
        if fm.is_identity:
            key = ("identity", N, spatial.mu_inv)
            cached = None if class_cache is None else class_cache.get(key)
            if cached is None:
                from .spectral_core import grid_points

                chis = class_cutoffs(spatial, grid_points(N))
                cached = {}
                for ci, chi in chis.items():
                    flat = chi.reshape(-1)
                    pts = np.flatnonzero(flat > 0)
                    cached[ci] = (pts, flat[pts])
                if class_cache is not None:
                    class_cache[key] = cached
            J_full = None
        else:
            chis = class_cutoffs(spatial, fm.xi(t))
            cached = {}
            for ci, chi in chis.items():
                flat = chi.reshape(-1)
                pts = np.flatnonzero(flat > 0)
                cached[ci] = (pts, flat[pts])
            J_full = np.array(fm.grad(t)).reshape(3, 3, -1)
        for ci, fam in enumerate(families):
            pts, chi = cached[ci]
            if pts.size == 0:
                continue
            J = None if J_full is None else J_full[:, :, pts]
            cell = CellWeights(p, ci, pts, th, chi, J)
            cell.families["R"] = transport_weights(R_flat[:, pts], J, fam.R, lam_q, gamma, delta, N0, pts)
            cell.families["Phi"] = cubic_weights(Phi_flat[:, pts], J, fam.Phi, delta, pts)
            for kind in ("R", "Phi"):
                W[:, pts] += prior_contribution(cell.families[kind], cell.cutoff(kind) ** 2, psi2_means[kind])
            cells.append(cell)
    for cell in cells:
        fam = families[cell.cls]
        pts = cell.points
        fw = quadratic_weights(S_flat[:, pts], W[:, pts], cell.J, fam.S, delta, pts)
        if (cell.p, "S") in flips:
            fw.a = -fw.a
        cell.families["S"] = fw
        for kind in ("R", "Phi"):
            if (cell.p, kind) in flips:
                cell.families[kind].a = -cell.families[kind].a
    return WeightSet(t, N, cells, W, frozenset(flips))


def cancellation_report(ws: WeightSet, R_l, Phi_l, S_l, delta: float, moments: dict, samples: int = 100, seed: int = 0) -> dict:
    """Check the three low-frequency identities at random grid points.

    The partition sums are formed explicitly: at each sampled point the
    contributions of every active cell covering the point are added with the
    appropriate cutoff powers.
    """
    rng = np.random.default_rng(seed)
    N = ws.N
    covered = np.zeros(N**3, dtype=bool)
    for c in ws.cells:
        covered[c.points] = True
    cand = np.flatnonzero(covered)
    if cand.size == 0:
        return {"samples": 0, "transport": 0.0, "cubic": 0.0, "quadratic": 0.0}
    pick = rng.choice(cand, size=min(samples, cand.size), replace=False)
    R = R_l.reshape(3, -1)[:, pick]
    Phi = Phi_l.reshape(6, -1)[:, pick]
    S = S_l.reshape(6, -1)[:, pick]
    tr = np.zeros((3, pick.size))
    cu = np.zeros((6, pick.size))
    qu = np.zeros((6, pick.size))
    for c in ws.cells:
        pos = np.searchsorted(c.points, pick)
        pos = np.minimum(pos, c.points.size - 1)
        hit = c.points[pos] == pick
        if not np.any(hit):
            continue
        loc = pos[hit]
        for kind, fw in c.families.items():
            cut = c.cutoff(kind)[loc]
            for k in range(fw.a.shape[0]):
                a, b, ht = fw.a[k][loc], fw.b[k][loc], fw.tilted[k][:, loc]
                tr[:, hit] += cut**2 * a * b * moments[kind]["psi_phi"] * ht
                cu[:, hit] += cut**3 * a * a * b * moments[kind]["psi2_phi"] * outer6(ht)
                qu[:, hit] += cut**2 * a * a * moments[kind]["psi2"] * outer6(ht)
    scale_R = max(float(np.abs(R).max()), 1e-300)
    return {
        "samples": int(pick.size),
        "transport": float(np.abs(tr - R).max() / max(scale_R, float(np.abs(tr).max()))),
        "cubic": float(np.abs(cu - (delta**1.5 * _ID6[:, None] - Phi)).max() / delta**1.5),
        "quadratic": float(np.abs(qu - (delta * _ID6[:, None] - S)).max() / delta),
    }
