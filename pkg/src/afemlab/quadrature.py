"""Quadrature rules on the reference triangle and the unit interval.

Barycentric points with weights summing to one; physical integrals multiply
by the element area (or edge length).  Degrees up to 4 use the classical
symmetric rules; higher degrees fall back to a Duffy-transformed tensor
Gauss rule, which is exact for any requested polynomial degree.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = ["triangle_rule", "gauss01"]

_TRI_DEG1 = (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0]))

_a = 2 / 3
_TRI_DEG2 = (
    np.array([[_a, (1 - _a) / 2, (1 - _a) / 2],
              [(1 - _a) / 2, _a, (1 - _a) / 2],
              [(1 - _a) / 2, (1 - _a) / 2, _a]]),
    np.full(3, 1 / 3),
)

# 6-point degree-4 symmetric rule (Dunavant)
_a1, _w1 = 0.445948490915965, 0.223381589678011
_a2, _w2 = 0.091576213509771, 0.109951743655322


def _sym3(a):
    b = 1.0 - 2.0 * a
    return [[b, a, a], [a, b, a], [a, a, b]]


_TRI_DEG4 = (
    np.array(_sym3(_a1) + _sym3(_a2)),
    np.array([_w1] * 3 + [_w2] * 3),
)


@lru_cache(maxsize=None)
def gauss01(n: int):
    """n-point Gauss-Legendre rule on [0, 1]; weights sum to 1."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def _duffy(n: int):
    """Tensor Gauss collapsed onto the triangle; exact for degree 2n - 2."""
    x, wx = gauss01(n)
    pts, wts = [], []
    for i in range(n):
        for j in range(n):
            u, v = x[i], x[j] * (1.0 - x[i])
            pts.append([1.0 - u - v, u, v])
            wts.append(2.0 * wx[i] * wx[j] * (1.0 - x[i]))
    return np.array(pts), np.array(wts)


def triangle_rule(degree: int):
    """(barycentric points, weights) exact for polynomials of the degree."""
    if degree <= 1:
        return _TRI_DEG1
    if degree == 2:
        return _TRI_DEG2
    if degree <= 4:
        return _TRI_DEG4
    # Duffy integrand gains one degree from the Jacobian
    n = (degree + 1) // 2 + 1
    return _duffy(n)
