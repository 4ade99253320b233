"""Coarsening error preindicator.

Predicts ``||U - I_0 U||`` for every coarsenable patch, where ``I_0`` is
interpolation onto the mesh with that patch un-bisected, without touching the
mesh. Everything is encoded in the coarse-on-fine matrices ``A+``/``A-``
(coarse basis sampled at the fine nodes of child 0 / child 1) and the index
maps between coinciding coarse and fine nodes.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import reference as ref
from .fespace import FeFunction

_NODE_TOL = 1e-12


def child_node_bary(p, which):
    """Fine nodes of child ``which`` (0 = K+, 1 = K-) in parent barycentrics."""
    nodes = ref.node_bary(p)
    # child vertices in parent barycentrics
    P0, P1, P2, M = np.eye(3)[0], np.eye(3)[1], np.eye(3)[2], np.array([0.5, 0.5, 0.0])
    verts = np.array([P2, P0, M]) if which == 0 else np.array([P1, P2, M])
    return nodes @ verts


@dataclass(frozen=True)
class CoarseOnFineMatrices:
    """Coarse-on-fine data for degree ``p``.

    ``A_plus[i, j]`` is coarse basis function ``i`` at fine node ``j`` of K+.
    ``c_plus[j]`` is the coarse index of fine node ``j`` when the node is
    kept (``-1`` otherwise), ``d_plus[i]`` the inverse map.
    """

    p: int
    A_plus: np.ndarray
    A_minus: np.ndarray
    c_plus: tuple
    c_minus: tuple
    d_plus: tuple
    d_minus: tuple

    @property
    def D_plus(self):
        return frozenset(j for j, c in enumerate(self.c_plus) if c >= 0)

    @property
    def D_minus(self):
        return frozenset(j for j, c in enumerate(self.c_minus) if c >= 0)

    @property
    def C_plus(self):
        return frozenset(c for c in self.c_plus if c >= 0)

    @property
    def C_minus(self):
        return frozenset(c for c in self.c_minus if c >= 0)

    @property
    def n_local(self):
        return self.A_plus.shape[0]


@lru_cache(maxsize=None)
def build_coarse_on_fine(p) -> CoarseOnFineMatrices:
    ref.check_degree(p)
    coarse = ref.node_bary(p)
    mats, cmaps, dmaps = [], [], []
    for which in (0, 1):
        fine = child_node_bary(p, which)
        A = ref.basis(p, ref.bary_to_ref(fine)).T  # rows: coarse basis i, cols: fine node j
        A[np.abs(A) < 1e-14] = 0.0
        mats.append(A)
        c = [-1] * len(fine)
        d = [-1] * len(coarse)
        for j, x in enumerate(fine):
            hit = np.flatnonzero(np.abs(coarse - x).max(axis=1) < _NODE_TOL)
            if len(hit):
                c[j] = int(hit[0])
                d[int(hit[0])] = j
        cmaps.append(tuple(c))
        dmaps.append(tuple(d))
    return CoarseOnFineMatrices(p, mats[0], mats[1], cmaps[0], cmaps[1], dmaps[0], dmaps[1])


def assemble_y(y_plus, y_minus, cof: CoarseOnFineMatrices, tol=1e-12):
    """Coarse local DOF vector kept by coarsening (values dropped elsewhere).

    Entries in ``C+`` come from K+, the rest from K-.
    """
    y_plus = np.asarray(y_plus, dtype=float)
    y_minus = np.asarray(y_minus, dtype=float)
    L = cof.n_local
    if y_plus.shape[-1] != L or y_minus.shape[-1] != L:
        raise ValueError(f"expected local vectors of length {L}")
    y = np.empty(y_plus.shape[:-1] + (L,))
    for i in range(L):
        if cof.d_plus[i] >= 0:
            y[..., i] = y_plus[..., cof.d_plus[i]]
        else:
            y[..., i] = y_minus[..., cof.d_minus[i]]
    for i in cof.C_plus & cof.C_minus:
        a, b = y_plus[..., cof.d_plus[i]], y_minus[..., cof.d_minus[i]]
        if np.any(np.abs(a - b) > tol * np.maximum(1.0, np.abs(a))):
            raise ValueError(f"children disagree at shared coarse DOF {i}")
    return y


def coarsening_error_local(y_plus, y_minus, cof: CoarseOnFineMatrices, y=None):
    """Coefficients of ``U - I_0 U`` on K+ and K- in the fine bases."""
    if y is None:
        y = assemble_y(y_plus, y_minus, cof)
    r_plus = np.asarray(y_plus, dtype=float) - y @ cof.A_plus
    r_minus = np.asarray(y_minus, dtype=float) - y @ cof.A_minus
    r_plus[..., sorted(cof.D_plus)] = 0.0
    r_minus[..., sorted(cof.D_minus)] = 0.0
    return r_plus, r_minus


def elementwise_preindicator(U: FeFunction, patches):
    """Squared local coarsening error ``r' M_K r`` for every child leaf.

    Returns a dict ``leaf id -> gamma_K``.
    """
    space = U.space
    mesh = space.mesh
    cof = build_coarse_on_fine(space.p)
    parents = [P for patch in patches for P in patch.parents]
    if not parents:
        return {}
    kids = np.array([mesh.children[P] for P in parents], dtype=np.int64)
    rows = space.row_of(kids)
    if np.any(rows < 0):
        raise ValueError("patch children are not leaves of the function's space")
    yp = U.coeffs[space.l2g[rows[:, 0]]]
    ym = U.coeffs[space.l2g[rows[:, 1]]]
    y = assemble_y(yp, ym, cof, tol=np.inf)
    rp, rm = coarsening_error_local(yp, ym, cof, y=y)
    Mloc = space.local_mass()
    gp = np.einsum("ni,nij,nj->n", rp, Mloc[rows[:, 0]], rp)
    gm = np.einsum("ni,nij,nj->n", rm, Mloc[rows[:, 1]], rm)
    out = {}
    for (k0, k1), a, b in zip(kids, gp, gm):
        out[int(k0)] = float(a)
        out[int(k1)] = float(b)
    return out


def coarsening_preindicator(U: FeFunction, patches=None):
    """Predicted squared L2 coarsening loss per coarsenable patch."""
    mesh = U.space.mesh
    if patches is None:
        if U.space.leafset != mesh.snapshot():
            raise ValueError("function does not live on the current leaves")
        patches = mesh.coarsenable_patches()
    gK = elementwise_preindicator(U, patches)
    return {patch: sum(gK[c] for c in patch.children(mesh)) for patch in patches}
