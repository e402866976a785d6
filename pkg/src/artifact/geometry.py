"""Direction families and the two pointwise decomposition lemmas.

Each family has three subfamilies: a transport frame of four vectors (three
pairwise orthogonal plus minus their sum), and two isotropic six-vector sets
whose rank-one matrices span the symmetric matrices.  The 27 families are
integer rescalings of a base family; rescaling keeps every line (and hence the
tube geometry) but makes the vector sets pairwise disjoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .spectral_core import TENSOR_PAIRS


class GeometryError(ValueError):
    """Raised when a decomposition leaves its domain or a family is invalid."""


BASE_TRANSPORT = np.array([(1, 2, 0), (-2, 1, 0), (0, 0, 1), (1, -3, -1)], dtype=int)
BASE_CUBIC = np.array([(1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1)], dtype=int)
BASE_QUADRATIC = np.array([(3, 1, 0), (3, -1, 0), (0, 3, 1), (0, 3, -1), (1, 0, 3), (-1, 0, 3)], dtype=int)

KINDS = ("R", "Phi", "S")


def family_index(i) -> int:
    """Linear index of ``i`` in ``Z_3^3``."""
    return int(i[0]) * 9 + int(i[1]) * 3 + int(i[2])


def sym_basis(vectors: np.ndarray) -> np.ndarray:
    """Columns are ``h (x) h`` in 6-component storage; shape ``(6, len(vectors))``."""
    v = np.asarray(vectors, dtype=float)
    return np.array([[h[i] * h[j] for h in v] for i, j in TENSOR_PAIRS])


def primitive(h) -> np.ndarray:
    h = np.asarray(h, dtype=int)
    g = np.gcd.reduce(np.abs(h))
    return h // g


@dataclass(frozen=True)
class DirectionFamily:
    """One family: four transport directions, six cubic and six quadratic directions."""

    index: tuple
    R: np.ndarray
    Phi: np.ndarray
    S: np.ndarray

    def vectors(self, kind: str) -> np.ndarray:
        return {"R": self.R, "Phi": self.Phi, "S": self.S}[kind]

    def all_vectors(self) -> list[tuple[int, int, int]]:
        return [tuple(int(c) for c in h) for kind in KINDS for h in self.vectors(kind)]

    def to_dict(self) -> dict:
        return {
            "index": list(self.index),
            "R": self.R.tolist(),
            "Phi": self.Phi.tolist(),
            "S": self.S.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DirectionFamily":
        return cls(
            tuple(d["index"]),
            np.array(d["R"], dtype=int),
            np.array(d["Phi"], dtype=int),
            np.array(d["S"], dtype=int),
        )


def default_direction_families() -> list[DirectionFamily]:
    """The 27 families; family ``i`` is ``(linear index + 1)`` times the base family."""
    fams = []
    for n in range(27):
        i = (n // 9, (n // 3) % 3, n % 3)
        s = n + 1
        fam = DirectionFamily(i, s * BASE_TRANSPORT, s * BASE_CUBIC, s * BASE_QUADRATIC)
        rep = verify_family(fam)
        if not rep["ok"]:
            raise GeometryError(f"family {i} failed verification: {rep}")
        fams.append(fam)
    seen: dict = {}
    for fam in fams:
        for v in fam.all_vectors():
            if v in seen and seen[v] != fam.index:
                raise GeometryError(f"families {seen[v]} and {fam.index} share {v}")
            seen[v] = fam.index
    return fams


def families_to_json(families) -> str:
    return json.dumps([f.to_dict() for f in families])


def families_from_json(text: str) -> list[DirectionFamily]:
    return [DirectionFamily.from_dict(d) for d in json.loads(text)]


# ---------------------------------------------------------------------------
# first lemma: symmetric matrices near the identity


def first_coefficients(family6, A: np.ndarray, check: bool = True) -> np.ndarray:
    """Solve ``sum_h c_h h (x) h = A`` for ``c``.

    Parameters
    ----------
    family6 : array of shape ``(6, 3)``
    A : array of shape ``(6, ...)``
        Symmetric matrices in 6-component storage.

    Returns
    -------
    ndarray of shape ``(6, ...)``; raises ``GeometryError`` if any coefficient
    is not positive and ``check`` is set.
    """
    B = sym_basis(family6)
    if np.linalg.matrix_rank(B) < 6:
        raise GeometryError("rank-one matrices of the family do not span the symmetric matrices")
    A = np.asarray(A, dtype=float)
    flat = A.reshape(6, -1)
    c = np.linalg.solve(B, flat).reshape(A.shape)
    if check and c.size and np.min(c) <= 0.0:
        worst = np.unravel_index(np.argmin(c), c.shape)
        raise GeometryError(
            f"outside S_N: coefficient {c[worst]:.3e} <= 0 for direction {tuple(family6[worst[0]])}"
        )
    return c


def gamma_first(family6, A: np.ndarray) -> np.ndarray:
    """``Gamma_h = sqrt(c_h)`` so that ``sum_h Gamma_h^2 h (x) h = A``."""
    return np.sqrt(first_coefficients(family6, A))


def positivity_radius(family6) -> float:
    """Largest ``r`` with all coefficients positive whenever ``A = Id - K`` and ``max|K_ij| <= r``."""
    B = sym_basis(family6)
    Binv = np.linalg.inv(B)
    c_id = Binv @ np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    # off-diagonal entries appear once in storage but bound two matrix entries
    return float(np.min(c_id / np.abs(Binv).sum(axis=1)))


# ---------------------------------------------------------------------------
# second lemma: vectors


def second_offset(family4, N0: float) -> float:
    norms = np.linalg.norm(np.asarray(family4, dtype=float)[:3], axis=1)
    return float(N0 * (1.0 + np.max(1.0 / norms)))


def gamma_second(family4, w: np.ndarray, N0: float, check: bool = True) -> np.ndarray:
    """Affine coefficients with ``sum_h Gamma_h h = w`` and ``Gamma_h >= N0``.

    Parameters
    ----------
    family4 : array ``(4, 3)``; the first three are pairwise orthogonal and the
        fourth is minus their sum.
    w : array ``(3, ...)``
    N0 : float
        Radius of the admissible ball and lower bound of the coefficients.
    """
    h = np.asarray(family4, dtype=float)
    w = np.asarray(w, dtype=float)
    if check:
        size = np.sqrt(np.sum(w * w, axis=0))
        if size.size and np.max(size) > N0 * (1 + 1e-12):
            raise GeometryError(f"|w| = {np.max(size):.3e} exceeds the ball radius N0 = {N0:.3e}")
    c0 = second_offset(h, N0)
    out = np.empty((4,) + w.shape[1:])
    for i in range(3):
        out[i] = c0 + np.tensordot(h[i], w, axes=(0, 0)) / np.dot(h[i], h[i])
    out[3] = c0
    return out


# ---------------------------------------------------------------------------
# verification


def verify_family(family: DirectionFamily) -> dict:
    """Check isotropy, spanning and the frame condition; returns a report dict."""
    rep: dict = {}
    ok = True
    for kind in ("Phi", "S"):
        v = np.asarray(family.vectors(kind), dtype=float)
        M = v.T @ v
        C = float(M[0, 0])
        iso = bool(np.allclose(M, C * np.eye(3), atol=1e-12) and C > 0)
        B = sym_basis(v)
        cond = float(np.linalg.cond(B))
        spans = bool(np.isfinite(cond) and np.linalg.matrix_rank(B) == 6)
        rep[kind] = {"isotropic": iso, "C": C, "spans": spans, "condition": cond}
        ok = ok and iso and spans
    r = np.asarray(family.R, dtype=float)
    gram = r[:3] @ r[:3].T
    orth = bool(np.allclose(gram - np.diag(np.diag(gram)), 0.0) and np.all(np.diag(gram) > 0))
    closes = bool(np.array_equal(family.R[3], -(family.R[0] + family.R[1] + family.R[2])))
    rep["R"] = {"orthogonal": orth, "closes": closes}
    ok = ok and orth and closes
    rep["ok"] = ok
    return rep
