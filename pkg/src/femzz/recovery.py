"""Gradient recovery by area-weighted nodal averaging and the ZZ estimator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import reference as ref
from .fespace import FeFunction, FeSpace
from .quadrature import triangle_rule


@dataclass
class RecoveredGradient:
    """Components of the recovered gradient, each a P^p nodal field."""

    gx: FeFunction
    gy: FeFunction

    def grads_at(self, ref_points):
        return np.stack([self.gx.values_at(ref_points), self.gy.values_at(ref_points)], axis=-1)


def recover_gradient(V: FeFunction) -> RecoveredGradient:
    """At every DOF point, average ``grad V|_K`` over the elements touching it
    with weights ``|K|``.

    The nodal fields are not constrained on the boundary.
    """
    space = V.space
    nodes = ref.node_bary(space.p)
    G = space.physical_grads(ref.bary_to_ref(nodes))  # (n, L, L, 2): at node q, basis l
    g = np.einsum("nqla,nl->nqa", G, V.local())  # gradient of V|_K at its own nodes
    w = np.broadcast_to(space.areas[:, None], g.shape[:2])
    idx = space.l2g.ravel()
    wsum = np.bincount(idx, weights=w.ravel(), minlength=space.dim)
    gx = np.bincount(idx, weights=(w * g[..., 0]).ravel(), minlength=space.dim) / wsum
    gy = np.bincount(idx, weights=(w * g[..., 1]).ravel(), minlength=space.dim) / wsum
    return RecoveredGradient(FeFunction(space, gx), FeFunction(space, gy))


def elliptic_estimator(V: FeFunction, C0=1.0):
    """Global ``C0 ||G V - grad V||`` and the per-leaf contributions.

    Returns ``(total, eps_K)`` with ``total**2 == sum(eps_K**2)``.
    """
    space = V.space
    R = recover_gradient(V)
    rule = triangle_rule(2 * space.p)
    diff = R.grads_at(rule.points) - V.grads_at(rule.points)
    eK2 = space.areas * ((diff**2).sum(axis=-1) @ rule.weights)
    eK = C0 * np.sqrt(eK2)
    return float(np.sqrt(np.sum(eK**2))), eK
