"""Numerical quadrature on the reference triangle and on edges.

Triangle rules are conical-product Gauss rules (Gauss-Legendre x
Gauss-Jacobi through the Duffy map), so every rule has strictly positive
weights and a guaranteed polynomial exactness degree.  The reference
triangle is {(x, y): x >= 0, y >= 0, x + y <= 1} with area 1/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MIN_DEGREE = 1
MAX_DEGREE = 10

_rule_cache: dict[int, "QuadratureRule"] = {}
_edge_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature rule on the reference triangle.

    points holds barycentric coordinates (lam1, lam2, lam3) per node with
    lam2 = x, lam3 = y; weights sum to the reference area 1/2.
    """

    points: np.ndarray
    weights: np.ndarray
    exact_degree: int

    @property
    def npoints(self) -> int:
        return len(self.weights)

    @property
    def xy(self) -> np.ndarray:
        """Cartesian reference coordinates, shape (n, 2)."""
        return self.points[:, 1:]


def make_quadrature(exact_degree: int) -> QuadratureRule:
    """Build (and cache) a triangle rule exact for total degree `exact_degree`."""
    if not MIN_DEGREE <= exact_degree <= MAX_DEGREE:
        raise ValueError(f"unsupported quadrature degree {exact_degree}")
    if exact_degree in _rule_cache:
        return _rule_cache[exact_degree]

    n = (exact_degree + 2) // 2  # Gauss order: 2n-1 >= degree
    # x-direction: Gauss-Legendre on [0, 1]
    xg, wg = roots_legendre(n)
    xi = 0.5 * (xg + 1.0)
    wxi = 0.5 * wg
    # y-direction: Gauss-Jacobi with weight (1-u) on [-1, 1], mapped to [0, 1]
    uj, wj = roots_jacobi(n, 1.0, 0.0)
    eta = 0.5 * (uj + 1.0)
    weta = 0.25 * wj

    # Duffy map: (xi, eta) -> (xi*(1-eta), eta), Jacobian (1-eta) absorbed
    # into the Jacobi weight.
    xx = np.outer(1.0 - eta, xi).ravel()
    yy = np.repeat(eta, n)
    ww = np.outer(weta, wxi).ravel()

    lam = np.column_stack([1.0 - xx - yy, xx, yy])
    rule = QuadratureRule(points=lam, weights=ww, exact_degree=exact_degree)
    _rule_cache[exact_degree] = rule
    return rule


def edge_rule(npoints: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on [-1, 1]; exact for degree 2n-1."""
    if npoints not in _edge_cache:
        s, w = roots_legendre(npoints)
        _edge_cache[npoints] = (s, w)
    return _edge_cache[npoints]


def reference_monomial_integral(a: int, b: int) -> float:
    """Exact integral of x^a y^b over the reference triangle."""
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)
