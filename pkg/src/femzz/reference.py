"""Lagrange P^p shape functions on the reference triangle.

Local DOF ordering: the three vertices, then ``p - 1`` nodes on each edge
(edge ``i`` is opposite vertex ``i`` and runs from vertex ``(i+1) % 3`` to
vertex ``(i+2) % 3``), then interior nodes. For ``p = 2`` this is the
vertex/edge-midpoint layout used by the coarse-on-fine tables.
"""
from functools import lru_cache

import numpy as np

SUPPORTED_DEGREES = (1, 2, 3, 4)


def check_degree(p):
    if p not in SUPPORTED_DEGREES:
        raise ValueError(f"unsupported polynomial degree p={p}; expected one of {SUPPORTED_DEGREES}")


def n_local(p):
    return (p + 1) * (p + 2) // 2


@lru_cache(maxsize=None)
def node_multi_indices(p):
    """Integer barycentric multi-indices (sum ``p``) of the local nodes."""
    check_degree(p)
    nodes = [(p, 0, 0), (0, p, 0), (0, 0, p)]
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        for s in range(1, p):
            m = [0, 0, 0]
            m[j] = p - s
            m[k] = s
            nodes.append(tuple(m))
    for a in range(p - 1, 0, -1):
        for b in range(p - a - 1, 0, -1):
            c = p - a - b
            nodes.append((a, b, c))
    return tuple(nodes)


@lru_cache(maxsize=None)
def node_bary(p):
    """Barycentric coordinates of the local nodes, shape ``(L+1, 3)``."""
    return np.array(node_multi_indices(p), dtype=float) / p


def _monomials(p):
    return [(a, d - a) for d in range(p + 1) for a in range(d, -1, -1)]


@lru_cache(maxsize=None)
def _coefficients(p):
    nodes = node_bary(p)
    x, y = nodes[:, 1], nodes[:, 2]
    V = np.column_stack([x**a * y**b for a, b in _monomials(p)])
    # column j of C holds the monomial coefficients of basis function j
    return np.linalg.inv(V)


def basis(p, points):
    """Basis values at reference points, shape ``(npts, L+1)``."""
    points = np.atleast_2d(points)
    x, y = points[:, 0], points[:, 1]
    V = np.column_stack([x**a * y**b for a, b in _monomials(p)])
    return V @ _coefficients(p)


def _dpow(z, a):
    if a == 0:
        return np.zeros_like(z)
    return a * z ** (a - 1)


def basis_grad(p, points):
    """Reference gradients at points, shape ``(npts, L+1, 2)``."""
    points = np.atleast_2d(points)
    x, y = points[:, 0], points[:, 1]
    mons = _monomials(p)
    Dx = np.column_stack([_dpow(x, a) * y**b for a, b in mons])
    Dy = np.column_stack([x**a * _dpow(y, b) for a, b in mons])
    C = _coefficients(p)
    return np.stack([Dx @ C, Dy @ C], axis=-1)


def bary_to_ref(bary):
    bary = np.atleast_2d(bary)
    return bary[:, 1:3].copy()
