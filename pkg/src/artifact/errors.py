"""New error terms after one correction and the residual of the Euler-Reynolds system.

The system is

    d_t rho + div(rho u)                         = -div R
    d_t(rho u) + div(rho u (x) u) + grad p      = -(d_t + u . grad) R - div(R (x) u) + div Phi - div(rho S)
    div u                                        = 0

with ``div(a (x) b)_i = d_j(a_j b_i)``.  On the grid every product is formed
pointwise and truncated once (``T``); raw binary products are differentiated
before truncation, cubic ones after.  Because all inputs are band limited at a
third of the grid frequencies, these rules make the discrete identities below
exact up to the time stencil.

Given an old tuple and a perturbation ``(theta, w)`` the new tuple is
``rho + theta, u + w, p + delta rho`` and the errors are assembled from named
parts: four flux parts, seven current parts and five stress parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .invdiv import inv_div_scalar_values, inv_div_vector_values
from .projectors import project_low_values
from .spectral_core import (
    TENSOR_PAIRS,
    div_outer,
    divergence_values,
    gradient_values,
    outer_sym,
    truncate,
    vector_gradient_values,
)
from .timefields import CACHE, ComputedField, MappedField, SumField, TimeField, ZeroField, linear_combination


class AssemblyError(ValueError):
    """Raised on a hard failure of the error assembly (e.g. nonpositive density)."""


FLUX_PARTS = ("R_O", "R_T", "R_N", "R_M")
CURRENT_PARTS = ("phi_T", "phi_O", "phi_R", "phi_H1", "phi_H2", "phi_M1", "phi_M2")
STRESS_PARTS = ("S_O", "S_M", "S_T1", "S_T2", "S_N")
# parts with a nonzero spatial mean, in the order of the integrated means
MEAN_PARTS = ("phi_T", "phi_H1", "phi_H2", "S_M", "S_T1", "S_T2", "S_N")


# ---------------------------------------------------------------------------
# products on the grid


def _T(values: np.ndarray) -> np.ndarray:
    return truncate(values)


def _sv(s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Raw scalar times vector/tensor."""
    return s[None] * v if s.ndim == 3 else s * v


def _scalar(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[-3:])


def advect_raw(u: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Raw ``(u . grad) f`` for vector ``f`` (derivatives exact, product untruncated)."""
    G = vector_gradient_values(f)  # G[i, j] = d_j f_i
    return np.einsum("jxyz,ijxyz->ixyz", u, G)


def div_T_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``div T[a (x) b]`` for raw-exact binary products."""
    return div_outer(a, b)


def sym_id(c, N: int) -> np.ndarray:
    out = np.zeros((6, N, N, N))
    out[:3] = c
    return out


def sym_outer_full(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a (x) b + b (x) a`` in six components."""
    return 2.0 * outer_sym(a, b)


def div_sym(S: np.ndarray) -> np.ndarray:
    return divergence_values(S)


# ---------------------------------------------------------------------------
# residual


def _density_flux(rho: TimeField, u: TimeField, t: float) -> np.ndarray:
    return _T(_sv(_scalar(rho.value(t)), u.value(t)))


def _density_flux_rate(rho: TimeField, u: TimeField, t: float) -> np.ndarray:
    return _T(_sv(_scalar(rho.deriv(t)), u.value(t)) + _sv(_scalar(rho.value(t)), u.deriv(t)))


@dataclass
class Residual:
    """Residual fields at one instant with the sizes of the individual terms."""

    t: float
    mass: np.ndarray
    momentum: np.ndarray
    divergence: np.ndarray
    scales: dict

    def relative(self) -> dict:
        return {
            "mass": float(np.abs(self.mass).max() / max(self.scales["mass"], 1e-300)),
            "momentum": float(np.abs(self.momentum).max() / max(self.scales["momentum"], 1e-300)),
            "divergence": float(np.abs(self.divergence).max() / max(self.scales["divergence"], 1e-300)),
        }

    def absolute(self) -> dict:
        return {
            "mass": float(np.abs(self.mass).max()),
            "momentum": float(np.abs(self.momentum).max()),
            "divergence": float(np.abs(self.divergence).max()),
        }


def residual(state, t: float) -> Residual:
    """Evaluate the three equation residuals of ``state`` at ``t``.

    ``state`` needs ``rho, u, p, R, Phi, S`` as time fields.  Relative sizes
    divide the sup norm of a residual by the largest sup norm among its terms
    (a unit floor is used when every term vanishes).
    """
    rho, u, p, R, Phi, S = state.rho, state.u, state.p, state.R, state.Phi, state.S
    rv = _scalar(rho.value(t))
    uv = u.value(t)
    Rv = R.value(t)
    m_terms = {
        "d_t rho": _scalar(rho.deriv(t)),
        "div(rho u)": divergence_values(_density_flux(rho, u, t)),
        "div R": divergence_values(Rv),
    }
    mass = sum(m_terms.values())
    mom_terms = {
        "d_t(rho u)": _density_flux_rate(rho, u, t),
        "div(rho u u)": divergence_values(_T(_sv(rv, outer_sym(uv, uv)))),
        "grad p": gradient_values(_scalar(p.value(t))),
        "d_t R": R.deriv(t),
        "u.grad R": _T(advect_raw(uv, Rv)),
        "div(R u)": div_T_outer(Rv, uv),
        "-div Phi": -div_sym(Phi.value(t)),
        "div(rho S)": div_sym(_T(_sv(rv, S.value(t)))),
    }
    mom = sum(mom_terms.values())
    div = divergence_values(uv)
    scales = {
        "mass": max(1.0 if all(not np.any(v) for v in m_terms.values()) else 0.0, max(np.abs(v).max() for v in m_terms.values())),
        "momentum": max(
            1.0 if all(not np.any(v) for v in mom_terms.values()) else 0.0, max(np.abs(v).max() for v in mom_terms.values())
        ),
        "divergence": max(1.0, float(np.abs(uv).max())),
    }
    return Residual(t, mass, mom, div, scales)


# ---------------------------------------------------------------------------
# division by the density


def divide_by_density(rho: np.ndarray, B: np.ndarray, rtol: float = 1e-13, maxiter: int = 500) -> tuple[np.ndarray, dict]:
    """Band-limited ``S`` with ``T[rho S] = B``.

    The map ``S -> T[rho T[S]]`` is symmetric and positive on band-limited
    fields when ``rho > 0``; it is inverted by conjugate gradients
    preconditioned with pointwise division.
    """
    rho = _scalar(rho)
    if rho.min() <= 0.0:
        raise AssemblyError(f"density is not positive (min {rho.min():.3e}); cannot divide")
    shape = B.shape
    if not np.any(B):
        return np.zeros(shape), {"iterations": 0, "residual": 0.0}

    def matvec(x):
        S = _T(x.reshape(shape))
        return _T(_sv(rho, S)).ravel()

    def precond(x):
        return _T(x.reshape(shape) / rho[None]).ravel()

    n = int(np.prod(shape))
    A = LinearOperator((n, n), matvec=matvec, dtype=float)
    Mp = LinearOperator((n, n), matvec=precond, dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    b = _T(B).ravel()
    x0 = precond(b)
    x, info = cg(A, b, x0=x0, rtol=rtol, atol=0.0, maxiter=maxiter, M=Mp, callback=cb)
    S = _T(x.reshape(shape))
    res = float(np.abs(matvec(S.ravel()) - b).max() / max(np.abs(b).max(), 1e-300))
    if info != 0 and res > 1e-10:
        raise AssemblyError(f"density division did not converge (relative residual {res:.2e})")
    return S, {"iterations": count[0], "residual": res}


# ---------------------------------------------------------------------------
# assembly


@dataclass
class StepInputs:
    """Everything the error assembly reads, as lazy time fields.

    ``rho_l``, ``u_l`` are the spatially projected density and velocity;
    ``R_proj`` is the spatially projected flux error entering the
    commutator term; ``R_l``, ``Phi_l``, ``S_l`` are the fully mollified errors.
    ``step`` is the shared finite-difference step of all computed parts and
    ``t_ref`` the start of the interval on which the means are integrated.
    """

    N: int
    delta: float
    ell: float
    rho: TimeField
    u: TimeField
    p: TimeField
    R: TimeField
    Phi: TimeField
    S: TimeField
    R_l: TimeField
    Phi_l: TimeField
    S_l: TimeField
    theta: TimeField
    w: TimeField
    step: float
    t_ref: float = 0.0
    rho_l: TimeField | None = None
    u_l: TimeField | None = None
    R_proj: TimeField | None = None

    def __post_init__(self):
        K = 1.0 / self.ell
        op = lambda v: project_low_values(v, K)
        if self.rho_l is None:
            self.rho_l = MappedField(op, self.rho)
        if self.u_l is None:
            self.u_l = MappedField(op, self.u)
        if self.R_proj is None:
            self.R_proj = MappedField(op, self.R)


class ErrorAssembly:
    """Named parts of the new errors and the new tuple as lazy fields."""

    def __init__(self, inp: StepInputs, check_parts: bool = False):
        self.inp = inp
        self.N = inp.N
        self.check_parts = check_parts
        self.part_checks: dict = {}
        self.division_stats: dict = {}
        h = inp.step
        N = inp.N
        self.R_pre = ComputedField("vector", N, self._R_pre, h, name="R_pre")
        self.Z = ComputedField("vector", N, lambda t: self._Z(t)[0], h, name="Z")
        self.M = ComputedField("vector", N, self._momentum_mean_field, h, name="M")
        self.Y = ComputedField("vector", N, self._Y, h, name="Y")
        self.rho_new = linear_combination([(1.0, inp.rho), (1.0, inp.theta)], "scalar", N)
        self.u_new = linear_combination([(1.0, inp.u), (1.0, inp.w)], "vector", N)
        self.p_new = linear_combination([(1.0, inp.p), (inp.delta, inp.rho)], "scalar", N)
        self.R_new = ComputedField("vector", N, lambda t: np.array(self.R_pre.value(t)) + self.Y.value(t), h, name="R_new")
        self.Phi_new = ComputedField("symmetric_tensor", N, self._Phi_new, h, name="Phi_new")
        self.S_new = ComputedField("symmetric_tensor", N, self._S_new, h, name="S_new")

    # basic values -----------------------------------------------------------

    def _base(self, t: float) -> dict:
        i = self.inp
        th = _scalar(i.theta.value(t))
        rho = _scalar(i.rho.value(t))
        rho_l = _scalar(i.rho_l.value(t))
        u = i.u.value(t)
        u_l = i.u_l.value(t)
        return {
            "theta": th,
            "w": i.w.value(t),
            "rho": rho,
            "rho_l": rho_l,
            "rho_t": rho - rho_l,
            "u": u,
            "u_l": u_l,
            "u_t": u - u_l,
            "R": i.R.value(t),
            "R_l": i.R_l.value(t),
        }

    # flux ------------------------------------------------------------------

    def flux_parts(self, t: float) -> dict:
        """``R_O, R_T, R_N, R_M`` at ``t``; the pre-flux is minus their sum."""
        b = self._base(t)
        th, w = b["theta"], b["w"]
        thw = _T(_sv(th, w))
        src_O = divergence_values(thw - b["R_l"])
        src_T = _scalar(self.inp.theta.deriv(t)) + _scalar(_T(np.einsum("jxyz,jxyz->xyz", b["u_l"], gradient_values(th))))
        src_N = _T(np.einsum("jxyz,jxyz->xyz", w, gradient_values(b["rho_l"])))
        parts = {
            "R_O": inv_div_scalar_values(src_O),
            "R_T": inv_div_scalar_values(src_T),
            "R_N": inv_div_scalar_values(src_N),
            "R_M": _T(_sv(th, b["u_t"])) + _T(_sv(b["rho_t"], w)) - (b["R"] - b["R_l"]),
        }
        if self.check_parts:
            for name, src in (("R_O", src_O), ("R_T", src_T), ("R_N", src_N)):
                err = divergence_values(parts[name]) - (src - src.mean())
                self.part_checks[name] = float(np.abs(err).max() / max(np.abs(src).max(), 1e-300))
        return parts

    def _R_pre(self, t: float) -> np.ndarray:
        return -sum(self.flux_parts(t).values())

    def _Z(self, t: float):
        b = self._base(t)
        th, w = b["theta"], b["w"]
        Z0 = np.array(self.R_pre.value(t)) - b["R"] + _T(_sv(th, w))
        Z = Z0 + _T(_sv(th, b["u_t"])) + _T(_sv(b["rho_t"], w))
        return Z, Z0

    # current and stress ----------------------------------------------------

    def current_parts(self, t: float) -> dict:
        i = self.inp
        b = self._base(t)
        th, w, u_l, u_t = b["theta"], b["w"], b["u_l"], b["u_t"]
        Rpre = np.array(self.R_pre.value(t))
        Z, Z0 = self._Z(t)
        N = self.N
        rho_u = _T(_sv(b["rho"], b["u"]))
        K = 1.0 / i.ell
        Q = divergence_values(_sv(b["rho_l"], u_l) - project_low_values(rho_u, K))
        divPR = divergence_values(i.R_proj.value(t))
        parts = {
            "phi_T": np.array(self.Z.deriv(t)) + _T(advect_raw(u_l, Z)),
            "phi_O": div_sym(_T(_sv(th, outer_sym(w, w))) + i.Phi_l.value(t)),
            "phi_R": div_T_outer(Rpre, w) + _T(advect_raw(w, Rpre)),
            "phi_H1": _T(_sv(Q - divPR, w)),
            "phi_H2": _T(advect_raw(Z, u_l)),
            "phi_M1": div_T_outer(Z0, u_t) + div_sym(i.Phi.value(t) - i.Phi_l.value(t)),
            "phi_M2": div_T_outer(u_t, Z),
        }
        return parts

    def stress_parts(self, t: float) -> dict:
        i = self.inp
        b = self._base(t)
        th, w, u, u_l, u_t = b["theta"], b["w"], b["u"], b["u_l"], b["u_t"]
        rho, rho_l = b["rho"], b["rho_l"]
        N = self.N
        S_l = i.S_l.value(t)
        inner = _sv(rho, outer_sym(w, w)) - _sv(rho, S_l) + _sv(rho, sym_id(i.delta, N))
        du_l = i.u_l.deriv(t)
        dw = i.w.deriv(t)
        parts = {
            "S_O": div_sym(_T(inner)),
            "S_M": _T(_sv(divergence_values(_sv(rho_l, u_t)), w))
            + div_outer(_sv(rho, w), u_t)
            - div_sym(_T(_sv(rho, i.S.value(t) - S_l))),
            "S_T1": _T(_sv(th, du_l + advect_raw(u_l, u_l))),
            "S_T2": _T(_sv(rho_l, dw + advect_raw(u, w))),
            "S_N": _T(_sv(rho_l, advect_raw(w, u_l))),
        }
        return parts

    # means and the spatially constant flux correction -----------------------

    def _momentum_mean_field(self, t: float) -> np.ndarray:
        flux = _T(_sv(_scalar(self.rho_new.value(t)), self.u_new.value(t)))
        m = (flux + np.array(self.R_pre.value(t))).mean(axis=(1, 2, 3))
        return np.broadcast_to(m[:, None, None, None], (3, self.N, self.N, self.N)).copy()

    def _Y(self, t: float) -> np.ndarray:
        return -(np.array(self.M.value(t)) - np.array(self.M.value(self.inp.t_ref)))

    def part_means(self, t: float) -> dict:
        """Spatial means of the current and stress parts at ``t``."""
        out = {}
        for name, v in {**self.current_parts(t), **self.stress_parts(t)}.items():
            out[name] = v.mean(axis=(1, 2, 3))
        return out

    def integrated_means(self, t: float, panels: int = 8) -> dict:
        """``int_{t_ref}^t <X_i>`` for the seven parts with nonzero means (composite Simpson)."""
        t0 = self.inp.t_ref
        n = 2 * max(1, int(panels))
        s = np.linspace(t0, t, n + 1)
        wts = np.ones(n + 1)
        wts[1:-1:2] = 4.0
        wts[2:-1:2] = 2.0
        wts *= (t - t0) / (3.0 * n)
        acc = {k: np.zeros(3) for k in MEAN_PARTS}
        for sk, wk in zip(s, wts):
            means = self.part_means(sk)
            for k in MEAN_PARTS:
                acc[k] = acc[k] + wk * means[k]
        return acc

    # new errors --------------------------------------------------------------

    def _Phi_new(self, t: float) -> np.ndarray:
        out = np.zeros((6, self.N, self.N, self.N))
        for name, v in self.current_parts(t).items():
            out += inv_div_vector_values(v)
            if self.check_parts:
                err = div_sym(inv_div_vector_values(v)) - (v - v.mean(axis=(1, 2, 3), keepdims=True))
                self.part_checks[name] = float(np.abs(err).max() / max(np.abs(v).max(), 1e-300))
        return out

    def stress_source(self, t: float) -> np.ndarray:
        """``rho_new S_new`` before division: minus the inverse divergences of the stress parts minus the mean-flux coupling."""
        out = np.zeros((6, self.N, self.N, self.N))
        for name, v in self.stress_parts(t).items():
            out -= inv_div_vector_values(v)
        Y = np.array(self.Y.value(t))
        out -= _T(sym_outer_full(Y, self.u_new.value(t)))
        return out

    def _S_new(self, t: float) -> np.ndarray:
        S, stats = divide_by_density(self.rho_new.value(t), self.stress_source(t))
        self.division_stats[float(t)] = stats
        return S

    # diagnostics -------------------------------------------------------------

    def decomposition_defect(self, t: float) -> dict:
        """Compare the sum of all parts with the momentum operator of the new tuple using the pre-flux."""
        i = self.inp
        rho_n, u_n = self.rho_new, self.u_new
        rv = _scalar(rho_n.value(t))
        uv = u_n.value(t)
        Rp = np.array(self.R_pre.value(t))
        L = (
            _density_flux_rate(rho_n, u_n, t)
            + divergence_values(_T(_sv(rv, outer_sym(uv, uv))))
            + gradient_values(_scalar(self.p_new.value(t)))
            + np.array(self.R_pre.deriv(t))
            + _T(advect_raw(uv, Rp))
            + div_T_outer(Rp, uv)
        )
        total = sum(self.current_parts(t).values()) + sum(self.stress_parts(t).values())
        return {
            "defect": float(np.abs(L - total).max()),
            "scale": float(max(np.abs(L).max(), np.abs(total).max(), 1e-300)),
        }

    def norm_table(self, t: float) -> list:
        """Sup norms (value, first derivatives, time derivative) of every named part at ``t``."""
        rows = []
        groups = [(FLUX_PARTS, self.flux_parts), (CURRENT_PARTS, self.current_parts), (STRESS_PARTS, self.stress_parts)]
        for names, fn in groups:
            vals = fn(t)
            for n in names:
                v = vals[n]
                grad = np.stack([gradient_values(c) for c in v])
                rows.append({"part": n, "sup": float(np.abs(v).max()), "sup_grad": float(np.abs(grad).max())})
        return rows


def new_state_fields(asm: ErrorAssembly) -> dict:
    """The new tuple as lazy fields."""
    return {
        "rho": asm.rho_new,
        "u": asm.u_new,
        "p": asm.p_new,
        "R": asm.R_new,
        "Phi": asm.Phi_new,
        "S": asm.S_new,
    }
