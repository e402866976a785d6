"""Truncated Taylor arithmetic for exact time derivatives of closed-form scalars.

A ``Jet`` stores normalized Taylor coefficients ``c_k = f^(k)(t) / k!`` up to a
fixed order.  Coefficients may be numpy arrays, so a jet can carry many
evaluation points at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Jet:
    coeffs: tuple

    @classmethod
    def variable(cls, t, order: int, scale: float = 1.0, shift: float = 0.0) -> "Jet":
        """The jet of ``scale * t + shift`` in the variable ``t``."""
        t = np.asarray(t, dtype=float)
        c = [scale * t + shift]
        if order >= 1:
            c.append(np.full_like(t, scale))
        c += [np.zeros_like(t)] * (order - 1)
        return cls(tuple(c))

    @classmethod
    def constant(cls, value, order: int) -> "Jet":
        value = np.asarray(value, dtype=float)
        return cls((value,) + (np.zeros_like(value),) * order)

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    @property
    def value(self):
        return self.coeffs[0]

    def derivative(self, k: int):
        """``f^(k)(t)``."""
        if k > self.order:
            raise ValueError(f"jet order {self.order} < requested derivative {k}")
        return self.coeffs[k] * math.factorial(k)

    def derivatives(self) -> list:
        return [self.derivative(k) for k in range(self.order + 1)]

    def _lift(self, other) -> "Jet":
        if isinstance(other, Jet):
            return other
        return Jet.constant(other, self.order)

    def __add__(self, other):
        other = self._lift(other)
        return Jet(tuple(a + b for a, b in zip(self.coeffs, other.coeffs)))

    __radd__ = __add__

    def __neg__(self):
        return Jet(tuple(-a for a in self.coeffs))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return Jet(tuple(a * other for a in self.coeffs))
        a, b = self.coeffs, other.coeffs
        return Jet(tuple(sum(a[j] * b[k - j] for j in range(k + 1)) for k in range(len(a))))

    __rmul__ = __mul__

    def reciprocal(self) -> "Jet":
        a = self.coeffs
        b = [1.0 / a[0]]
        for k in range(1, len(a)):
            b.append(-sum(a[j] * b[k - j] for j in range(1, k + 1)) / a[0])
        return Jet(tuple(b))

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            return self * (1.0 / other)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self._lift(other) * self.reciprocal()

    def exp(self) -> "Jet":
        a = self.coeffs
        b = [np.exp(a[0])]
        for k in range(1, len(a)):
            b.append(sum(j * a[j] * b[k - j] for j in range(1, k + 1)) / k)
        return Jet(tuple(b))

    def __pow__(self, p: float) -> "Jet":
        a = self.coeffs
        b = [np.power(a[0], p)]
        for k in range(1, len(a)):
            b.append(sum(((p + 1) * j - k) * a[j] * b[k - j] for j in range(1, k + 1)) / (k * a[0]))
        return Jet(tuple(b))

    def sqrt(self) -> "Jet":
        return self ** 0.5

    def where(self, mask, other: "Jet") -> "Jet":
        """Coefficient-wise ``self if mask else other``."""
        return Jet(tuple(np.where(mask, a, b) for a, b in zip(self.coeffs, other.coeffs)))


def flat_exp(x: Jet) -> Jet:
    """Jet of ``exp(-1/x)`` for ``x > 0`` and ``0`` otherwise (flat at the origin)."""
    x0 = np.asarray(x.value, dtype=float)
    pos = x0 > 0
    safe = Jet(tuple(np.where(pos, c, 1.0 if k == 0 else 0.0) for k, c in enumerate(x.coeffs)))
    val = (-safe.reciprocal()).exp()
    zero = Jet.constant(np.zeros_like(x0), x.order)
    return val.where(pos, zero)


def smooth_step_jet(x: Jet) -> Jet:
    """Jet of the smooth step ``f(x) / (f(x) + f(1 - x))`` with ``f(x) = exp(-1/x)``."""
    a = flat_exp(x)
    b = flat_exp(1.0 - x)
    return a / (a + b)
