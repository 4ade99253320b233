"""Quadrature rules on the reference triangle and on intervals.

Triangle rules are collapsed (Duffy) tensor products of Gauss-Jacobi and
Gauss-Legendre points, so any exactness degree is available.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

OVERKILL_DEGREE = 17


@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the reference triangle (0,0), (1,0), (0,1).

    ``points`` are reference coordinates, ``bary`` the matching barycentric
    coordinates; ``weights`` sum to one and are scaled by |K| at use.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def bary(self):
        x, y = self.points[:, 0], self.points[:, 1]
        return np.column_stack([1.0 - x - y, x, y])

    def __len__(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Rule exact for all polynomials of total degree <= ``degree``."""
    if degree < 0:
        raise ValueError("degree must be non-negative")
    n = max(1, (degree + 2) // 2)
    # x = u, y = v (1 - u); Jacobian (1 - u) absorbed by the Jacobi weight
    gu, wu = roots_jacobi(n, 1.0, 0.0)
    gv, wv = roots_legendre(n)
    u = 0.5 * (gu + 1.0)
    v = 0.5 * (gv + 1.0)
    wu = wu / 4.0
    wv = wv / 2.0
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    w = W.ravel()
    w = w / w.sum()
    pts = np.column_stack([x, y])
    pts.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(pts, w, degree)


@lru_cache(maxsize=None)
def gauss_interval(n: int):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    g, w = roots_legendre(n)
    return 0.5 * (g + 1.0), 0.5 * w
