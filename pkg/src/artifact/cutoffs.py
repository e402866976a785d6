"""Parameter schedule and the sextic partitions of unity in time and space."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .jets import Jet, smooth_step_jet


class ScheduleError(ValueError):
    """Raised when schedule inputs leave their admissible ranges."""


# ---------------------------------------------------------------------------
# parameter schedule


@dataclass(frozen=True)
class ParameterSchedule:
    """Frequencies, amplitudes and cutoff scales derived from a handful of inputs.

    Parameters
    ----------
    lambda0, b, beta : float
        Base frequency, super-exponential growth rate and target regularity.
    T : float or None
        Length of the time interval; ``None`` selects four temporal cutoff
        scales of the first stage.
    M : float
        Amplitude constant entering the temporal cutoff scale.
    eta : float
        Mikado support constant.
    alpha : float or None
        Regularity used for the decay exponent; defaults to the midpoint of
        ``(beta, 1/7)``.
    """

    lambda0: float = 5.0
    b: float = 1.5
    beta: float = 0.1
    T: float | None = None
    M: float = 2.0
    eta: float = 1.0
    alpha: float | None = None
    Lambda0: float = 1.0
    b_max: float = 2.0
    M_star: int = 6
    N_star: int = 12

    def __post_init__(self):
        problems = []
        if not (0.0 < self.beta < 1.0 / 7.0):
            problems.append(f"beta={self.beta} must lie in (0, 1/7)")
        if not (1.0 < self.b < self.b_max):
            problems.append(f"b={self.b} must lie in (1, {self.b_max})")
        if self.lambda0 < self.Lambda0 or self.lambda0 <= 1:
            problems.append(f"lambda0={self.lambda0} must be > 1 and >= Lambda0={self.Lambda0}")
        if self.M <= 0:
            problems.append(f"M={self.M} must be positive")
        if self.eta <= 0:
            problems.append(f"eta={self.eta} must be positive")
        if self.T is not None and self.T <= 0:
            problems.append(f"T={self.T} must be positive")
        a = self.alpha_value
        if not (self.beta < a < 1.0 / 7.0):
            problems.append(f"alpha={a} must lie in (beta, 1/7)")
        if problems:
            raise ScheduleError("; ".join(problems))

    # inputs -----------------------------------------------------------------

    @property
    def alpha_value(self) -> float:
        return (self.beta + 1.0 / 7.0) / 2.0 if self.alpha is None else self.alpha

    @property
    def horizon(self) -> float:
        """The time interval length (explicit ``T`` or four first-stage cutoff scales)."""
        return 4.0 * self.tau(0) if self.T is None else float(self.T)

    # derived ---------------------------------------------------------------

    def lam(self, q: int) -> int:
        return int(math.ceil(self.lambda0 ** (self.b**q) - 1e-12))

    def delta(self, q: int) -> float:
        return float(self.lam(q)) ** (-2.0 * self.beta)

    @property
    def gamma(self) -> float:
        return (self.b - 1.0) ** 2

    def tau(self, q: int) -> float:
        lq, lq1 = self.lam(q), self.lam(q + 1)
        dq, dq1 = self.delta(q), self.delta(q + 1)
        inv = 40.0 * math.pi * self.M / self.eta * math.sqrt(lq * lq1) * (dq * dq1) ** 0.25
        return 1.0 / inv

    def mu_inv(self, q: int) -> int:
        lq, lq1 = self.lam(q), self.lam(q + 1)
        dq, dq1 = self.delta(q), self.delta(q + 1)
        raw = math.sqrt(lq * lq1) * dq**0.25 * dq1**-0.25
        return 3 * int(math.ceil(raw / 3.0 - 1e-12))

    def mu(self, q: int) -> float:
        return 1.0 / self.mu_inv(q)

    def ell(self, q: int) -> float:
        lq, lq1 = self.lam(q), self.lam(q + 1)
        dq, dq1 = self.delta(q), self.delta(q + 1)
        return lq**-0.75 * lq1**-0.25 * (dq1 / dq) ** 0.375

    def ell_t(self, q: int) -> float:
        lq, lq1 = self.lam(q), self.lam(q + 1)
        dq, dq1 = self.delta(q), self.delta(q + 1)
        return lq ** (-(0.5 - 3.0 * self.gamma)) * lq1**-0.5 * dq**-0.25 * dq1**-0.25

    @property
    def n0(self) -> int:
        a, b = self.alpha_value, self.b
        return int(math.ceil(2.0 * b * (2.0 + a) / ((b - 1.0) * (1.0 - a)) - 1e-12))

    def window(self, q: int) -> tuple[float, float]:
        """Time domain of the stage-``q`` tuple: ``[0, T]`` widened by the previous cutoff scale."""
        if q == 0:
            return (-math.inf, math.inf)
        pad = self.tau(q - 1)
        return (-pad, self.horizon + pad)

    def check_invariants(self, qmax: int = 2) -> dict:
        """Verify the monotonicity and divisibility invariants for ``q <= qmax``."""
        out = {"mu_inv_divisible_by_3": all(self.mu_inv(q) % 3 == 0 for q in range(qmax + 1))}
        growth = [math.sqrt(self.delta(q)) * self.lam(q) for q in range(qmax + 2)]
        out["amplitude_frequency_increasing"] = all(x < y for x, y in zip(growth, growth[1:]))
        taus = [self.tau(q) for q in range(qmax + 2)]
        out["tau_decreasing"] = all(x > y for x, y in zip(taus, taus[1:]))
        return out

    def table(self, qmax: int = 1) -> dict:
        rows = []
        for q in range(qmax + 1):
            rows.append(
                {
                    "q": q,
                    "lambda": self.lam(q),
                    "delta": self.delta(q),
                    "tau": self.tau(q),
                    "mu_inv": self.mu_inv(q),
                    "ell": self.ell(q),
                    "ell_t": self.ell_t(q),
                }
            )
        return {
            "inputs": asdict(self),
            "gamma": self.gamma,
            "alpha": self.alpha_value,
            "n0": self.n0,
            "T": self.horizon,
            "stages": rows,
        }


# ---------------------------------------------------------------------------
# one-dimensional generators


def _raw_bump_jet(s: Jet, lo: float, hi: float, ramp: float) -> Jet:
    # 1 on [lo, hi], 0 outside (lo - ramp, hi + ramp)
    return smooth_step_jet((s - (lo - ramp)) * (1.0 / ramp)) * smooth_step_jet(((hi + ramp) - s) * (1.0 / ramp))


@dataclass(frozen=True)
class SexticPartition1D:
    """Unit-spaced family ``g(s - j)`` with ``sum_j g^6 = 1``.

    The generator equals one on ``[lo, hi]`` and vanishes outside
    ``(lo - ramp, hi + ramp)``.
    """

    lo: float
    hi: float
    ramp: float

    def __post_init__(self):
        support = (self.hi + self.ramp) - (self.lo - self.ramp)
        if support >= 2.0 or self.hi - self.lo + 2 * self.ramp <= 1.0:
            raise ValueError("generator must overlap only its nearest neighbours and cover the line")

    def _neighbours(self, s0: np.ndarray) -> list[np.ndarray]:
        base = np.floor(s0 - self.lo + self.ramp)
        return [base - 1, base, base + 1]

    def jet(self, s: Jet, j) -> Jet:
        """Jet of ``g_j(s)`` (normalized member ``j``; ``j`` may be an array)."""
        s0 = np.asarray(s.value, dtype=float)
        raw = _raw_bump_jet(s - np.asarray(j, dtype=float), self.lo, self.hi, self.ramp)
        total = None
        for jj in self._neighbours(s0):
            r = _raw_bump_jet(s - jj, self.lo, self.hi, self.ramp)
            r6 = r * r * r * r * r * r
            total = r6 if total is None else total + r6
        return raw * total ** (-1.0 / 6.0)

    def __call__(self, s, j=0) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return self.jet(Jet.variable(s, 0), j).value

    def members(self, s) -> list[tuple[np.ndarray, np.ndarray]]:
        """The (at most two) nonzero members at each ``s`` as ``(index, value)`` pairs."""
        s = np.asarray(s, dtype=float)
        out = []
        for jj in self._neighbours(s):
            out.append((jj.astype(int), self(s, jj)))
        return out


# generators: temporal plateau [1/8, 7/8] with support (-1/8, 9/8);
# spatial plateau |s| <= 7/16 with support |s| < 9/16 in units of the cube spacing
TEMPORAL_GENERATOR = SexticPartition1D(lo=0.125, hi=0.875, ramp=0.25)
SPATIAL_GENERATOR = SexticPartition1D(lo=-7.0 / 16.0, hi=7.0 / 16.0, ramp=1.0 / 8.0)


# ---------------------------------------------------------------------------
# temporal partition


@dataclass(frozen=True)
class TemporalPartition:
    """``theta_p(t) = g(t / tau - p)`` with sixth powers summing to one."""

    tau: float

    def jet(self, p, t, order: int = 0) -> Jet:
        s = Jet.variable(t, order, scale=1.0 / self.tau)
        return TEMPORAL_GENERATOR.jet(s, p)

    def __call__(self, p, t) -> np.ndarray:
        return self.jet(p, t).value

    def derivatives(self, p, t, order: int) -> list:
        """``[theta_p, theta_p', ..., theta_p^(order)]`` at ``t`` (exact)."""
        return self.jet(p, t, order).derivatives()

    def indexed(self, p, t, family: str, order: int = 0) -> list:
        """Derivatives of ``theta_I``: cube of ``theta_p`` for R and S, square for Phi."""
        j = self.jet(p, t, order)
        power = 2 if family == "Phi" else 3
        out = j
        for _ in range(power - 1):
            out = out * j
        return out.derivatives()

    def active(self, t: float) -> list[int]:
        s = t / self.tau
        cands = TEMPORAL_GENERATOR._neighbours(np.asarray(s))
        return [int(p) for p in cands if self(int(p), t) > 0.0]

    def support(self, p: int) -> tuple[float, float]:
        return ((p - 0.125) * self.tau, (p + 1.125) * self.tau)

    def plateau(self, p: int) -> tuple[float, float]:
        return ((p + 0.125) * self.tau, (p + 0.875) * self.tau)

    def indices_covering(self, t0: float, t1: float) -> list[int]:
        lo = int(math.floor(t0 / self.tau - 1.125)) - 1
        hi = int(math.ceil(t1 / self.tau + 0.125)) + 1
        return [p for p in range(lo, hi + 1) if self.support(p)[1] > t0 and self.support(p)[0] < t1]


# ---------------------------------------------------------------------------
# spatial partition


def class_of(k) -> tuple[int, int, int]:
    """Equivalence class of a lattice index: componentwise residue mod 3."""
    k = np.asarray(k, dtype=int)
    return tuple(int(v) for v in np.mod(k, 3))


def class_index(c) -> int:
    return int(c[0]) * 9 + int(c[1]) * 3 + int(c[2])


def class_from_index(i: int) -> tuple[int, int, int]:
    return (i // 9, (i // 3) % 3, i % 3)


@dataclass(frozen=True)
class SpatialPartition:
    """``chi_k(x) = chi_0(x / mu - 2 pi k)`` on the torus, ``k`` in ``{0..mu^{-1}-1}^3``.

    ``chi_0`` is a product of one-dimensional normalized generators so that
    ``sum_k chi_k^6 = 1``; it equals one on the closed cube of half-width
    ``7 pi / 8`` and vanishes outside the open cube of half-width ``9 pi / 8``.
    """

    mu_inv: int

    def __post_init__(self):
        if self.mu_inv % 3 or self.mu_inv < 3:
            raise ValueError("mu^{-1} must be a positive multiple of 3")

    def _axis_members(self, x: np.ndarray):
        # s in units of the cube spacing 2 pi mu
        s = np.asarray(x, dtype=float) * self.mu_inv / (2.0 * np.pi)
        out = []
        for jj in SPATIAL_GENERATOR._neighbours(s):
            val = SPATIAL_GENERATOR(s, jj)
            out.append((np.mod(jj.astype(int), self.mu_inv), val))
        return out

    def chi(self, k, x: np.ndarray) -> np.ndarray:
        """``chi_k`` at points ``x`` of shape ``(3, ...)``."""
        k = np.asarray(k, dtype=int)
        val = 1.0
        for a in range(3):
            axis = 0.0
            for idx, v in self._axis_members(x[a]):
                axis = axis + np.where(idx == k[a] % self.mu_inv, v, 0.0)
            val = val * axis
        return val

    def class_cutoff(self, cls, x: np.ndarray) -> np.ndarray:
        """``sum of chi_k`` over the lattice indices in class ``cls`` (at most one is nonzero)."""
        val = 1.0
        for a in range(3):
            axis = 0.0
            for idx, v in self._axis_members(x[a]):
                axis = axis + np.where(idx % 3 == cls[a], v, 0.0)
            val = val * axis
        return val

    def sixth_power_sum(self, x: np.ndarray) -> np.ndarray:
        val = 1.0
        for a in range(3):
            axis = 0.0
            for _, v in self._axis_members(x[a]):
                axis = axis + v**6
            val = val * axis
        return val

    def active_classes(self, x: np.ndarray) -> list[tuple[int, int, int]]:
        out = []
        for c0 in range(3):
            for c1 in range(3):
                for c2 in range(3):
                    if np.any(self.class_cutoff((c0, c1, c2), x) > 0):
                        out.append((c0, c1, c2))
        return out


def indexed_spatial_power(family: str) -> int:
    return 2 if family == "Phi" else 3
