"""Lagrange finite element spaces over a leaf set, assembly and transfer."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import reference as ref
from .mesh import LeafSet, ancestor_in
from .quadrature import OVERKILL_DEGREE, triangle_rule
from .sparse import SparseSym, cg_solve


class FeSpace:
    """Continuous P^p Lagrange space over the leaves of a mesh.

    Boundary DOFs are part of the numbering; members of the H^1_0 space keep
    them at zero and the system matrices are restricted to ``free``.
    """

    def __init__(self, leafset: LeafSet, p: int):
        ref.check_degree(p)
        self.leafset = leafset
        self.mesh = leafset.mesh
        self.p = p
        self.elements = leafset.elements
        tri = leafset.tri
        n = len(tri)
        self.n_local = ref.n_local(p)

        P = leafset.corners()
        self.corners = P
        J = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=-1)  # columns are edge vectors
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        self.jac = J
        self.det = det
        self.areas = 0.5 * np.abs(det)
        invJ = np.empty_like(J)
        invJ[:, 0, 0] = J[:, 1, 1] / det
        invJ[:, 1, 1] = J[:, 0, 0] / det
        invJ[:, 0, 1] = -J[:, 0, 1] / det
        invJ[:, 1, 0] = -J[:, 1, 0] / det
        self.invJT = np.transpose(invJ, (0, 2, 1))

        verts, vinv = np.unique(tri, return_inverse=True)
        vinv = vinv.reshape(n, 3)
        nv = len(verts)
        l2g = np.empty((n, self.n_local), dtype=np.int64)
        l2g[:, :3] = vinv

        # edges: local edge i opposite vertex i, from vertex (i+1)%3 to (i+2)%3
        a = np.stack([tri[:, 1], tri[:, 2], tri[:, 0]], axis=1)
        b = np.stack([tri[:, 2], tri[:, 0], tri[:, 1]], axis=1)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        pairs = np.stack([lo.ravel(), hi.ravel()], axis=1)
        edges, einv, ecount = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
        einv = einv.reshape(n, 3)
        forward = (a == lo)
        self.edges = edges
        boundary_edge = ecount == 1
        ne = len(edges)
        pe = p - 1
        col = 3
        for i in range(3):
            for s in range(1, p):
                pos = np.where(forward[:, i], s - 1, pe - s)
                l2g[:, col] = nv + einv[:, i] * pe + pos
                col += 1
        ni = (p - 1) * (p - 2) // 2
        base = nv + ne * pe
        for q in range(ni):
            l2g[:, col] = base + np.arange(n) * ni + q
            col += 1
        self.l2g = l2g
        self.dim = int(base + n * ni)
        self.n_vertex_dofs = nv
        self.vertex_ids = verts

        nodes = ref.node_bary(p)
        pts = np.einsum("lk,nkd->nld", nodes, P)
        dof_coords = np.empty((self.dim, 2))
        dof_coords[l2g.ravel()] = pts.reshape(-1, 2)
        self.dof_coords = dof_coords

        bnd = np.zeros(self.dim, dtype=bool)
        bedge_local = boundary_edge[einv]  # (n, 3)
        for i in range(3):
            sel = bedge_local[:, i]
            j, k = (i + 1) % 3, (i + 2) % 3
            bnd[l2g[sel, j]] = True
            bnd[l2g[sel, k]] = True
            if p > 1:
                cols = 3 + i * pe + np.arange(pe)
                bnd[l2g[np.ix_(sel, cols)].ravel()] = True
        self.boundary = bnd
        self.free = np.flatnonzero(~bnd)

        self._rows = np.full(self.mesh.n_elements, -1, dtype=np.int64)
        self._rows[self.elements] = np.arange(n)
        self._cache = {}

    def __repr__(self):
        return f"FeSpace(p={self.p}, leaves={len(self.elements)}, dim={self.dim})"

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def _row(self):
        """Element id -> row, ``-1`` off the leaf set; padded as the tree grows."""
        grow = self.mesh.n_elements - len(self._rows)
        if grow > 0:
            self._rows = np.concatenate([self._rows, np.full(grow, -1, dtype=np.int64)])
        return self._rows

    def row_of(self, element_ids):
        return self._row[np.asarray(element_ids)]

    def mesh_size(self):
        from .mesh import edge_lengths

        return edge_lengths(self.corners).max(axis=1)

    # geometry helpers -----------------------------------------------------------------
    def map_points(self, ref_points, rows=None):
        """Physical coordinates of reference points, shape ``(n, q, 2)``."""
        P = self.corners if rows is None else self.corners[rows]
        J = self.jac if rows is None else self.jac[rows]
        return P[:, None, 0, :] + np.einsum("nij,qj->nqi", J, np.atleast_2d(ref_points))

    def to_reference(self, rows, xy):
        """Reference coordinates of physical points ``xy`` in elements ``rows``."""
        rows = np.asarray(rows)
        d = np.asarray(xy) - self.corners[rows, 0, :]
        invJ = np.transpose(self.invJT[rows], (0, 2, 1))
        return np.einsum("nij,nj->ni", invJ, d)

    def physical_grads(self, ref_points, rows=None):
        """Basis gradients at reference points, shape ``(n, q, L+1, 2)``."""
        G = ref.basis_grad(self.p, ref_points)
        invJT = self.invJT if rows is None else self.invJT[rows]
        return np.einsum("nab,qlb->nqla", invJT, G)

    # assembly -------------------------------------------------------------------------
    def _assemble(self, local):
        n, L = self.l2g.shape
        I = np.repeat(self.l2g, L, axis=1).ravel()
        Jc = np.tile(self.l2g, (1, L)).ravel()
        A = sp.coo_matrix((local.ravel(), (I, Jc)), shape=(self.dim, self.dim)).tocsr()
        A.sum_duplicates()
        return A

    def local_mass(self):
        rule = triangle_rule(2 * self.p)
        phi = ref.basis(self.p, rule.points)
        Mref = np.einsum("q,qi,qj->ij", rule.weights, phi, phi)
        return self.areas[:, None, None] * Mref[None]

    def local_stiffness(self):
        rule = triangle_rule(max(2 * self.p - 2, 0))
        G = self.physical_grads(rule.points)
        return self.areas[:, None, None] * np.einsum("q,nqia,nqja->nij", rule.weights, G, G)

    def mass_full(self):
        if "M" not in self._cache:
            self._cache["M"] = self._assemble(self.local_mass())
        return self._cache["M"]

    def stiffness_full(self):
        if "S" not in self._cache:
            self._cache["S"] = self._assemble(self.local_stiffness())
        return self._cache["S"]

    def mass(self) -> SparseSym:
        """Mass matrix on the free (interior) DOFs."""
        if "Mf" not in self._cache:
            self._cache["Mf"] = SparseSym(self.mass_full()[self.free][:, self.free])
        return self._cache["Mf"]

    def stiffness(self) -> SparseSym:
        """Stiffness matrix on the free (interior) DOFs."""
        if "Sf" not in self._cache:
            self._cache["Sf"] = SparseSym(self.stiffness_full()[self.free][:, self.free])
        return self._cache["Sf"]

    def system(self, tau) -> SparseSym:
        """``M + tau S`` on the free DOFs, cached per timestep value."""
        key = ("sys", float(tau))
        if key not in self._cache:
            self._cache[key] = SparseSym(self.mass().csr + tau * self.stiffness().csr)
        return self._cache[key]

    def quadrature_points(self, degree):
        rule = triangle_rule(degree)
        return rule, self.map_points(rule.points)

    def load_vector(self, f, degree=None, t=None):
        """``b_i = int f Phi_i`` over all DOFs (boundary included).

        ``f`` takes ``(x, y)`` arrays, or ``(x, y, t)`` when ``t`` is given.
        """
        degree = 2 * self.p + 2 if degree is None else degree
        rule, X = self.quadrature_points(degree)
        vals = f(X[..., 0], X[..., 1]) if t is None else f(X[..., 0], X[..., 1], t)
        vals = np.broadcast_to(np.asarray(vals, dtype=float), X.shape[:2])
        phi = ref.basis(self.p, rule.points)
        local = self.areas[:, None] * np.einsum("q,nq,qi->ni", rule.weights, vals, phi)
        return np.bincount(self.l2g.ravel(), weights=local.ravel(), minlength=self.dim)

    def element_load(self, values_at_points, rule):
        """Local loads from function values at the rule's mapped points."""
        phi = ref.basis(self.p, rule.points)
        return self.areas[:, None] * np.einsum("q,nq,qi->ni", rule.weights, values_at_points, phi)

    def scatter(self, local):
        return np.bincount(self.l2g.ravel(), weights=np.asarray(local).ravel(), minlength=self.dim)

    # functions ------------------------------------------------------------------------
    def zero(self):
        return FeFunction(self, np.zeros(self.dim))

    def interpolate(self, v, zero_boundary=True):
        """Lagrange interpolant; ``v`` takes ``(x, y)`` arrays."""
        vals = np.asarray(v(self.dof_coords[:, 0], self.dof_coords[:, 1]), dtype=float)
        vals = np.array(np.broadcast_to(vals, (self.dim,)))
        if not np.all(np.isfinite(vals)):
            raise ValueError("interpolated function returned non-finite values")
        if zero_boundary:
            vals[self.boundary] = 0.0
        return FeFunction(self, vals)

    def from_free(self, x):
        c = np.zeros(self.dim)
        c[self.free] = x
        return FeFunction(self, c)


class FeFunction:
    """Coefficient vector over a :class:`FeSpace`."""

    __slots__ = ("space", "coeffs")

    def __init__(self, space: FeSpace, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.dim,):
            raise ValueError(f"coefficient length {coeffs.shape} does not match space dim {space.dim}")
        self.space = space
        self.coeffs = coeffs

    def __repr__(self):
        return f"FeFunction({self.space!r})"

    def _check(self, other):
        if other.space is not self.space:
            raise ValueError("functions live on different spaces")

    def __add__(self, other):
        self._check(other)
        return FeFunction(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return FeFunction(self.space, self.coeffs - other.coeffs)

    def __mul__(self, s):
        return FeFunction(self.space, self.coeffs * float(s))

    __rmul__ = __mul__

    def __truediv__(self, s):
        return FeFunction(self.space, self.coeffs / float(s))

    def __neg__(self):
        return FeFunction(self.space, -self.coeffs)

    @property
    def free_coeffs(self):
        return self.coeffs[self.space.free]

    def local(self):
        return self.coeffs[self.space.l2g]

    # pointwise ------------------------------------------------------------------------
    def evaluate(self, row, bary):
        """Value at barycentric points of the element in space row ``row``."""
        bary = _check_bary(bary)
        phi = ref.basis(self.space.p, ref.bary_to_ref(bary))
        return phi @ self.coeffs[self.space.l2g[row]]

    def gradient_at(self, row, bary):
        bary = _check_bary(bary)
        G = ref.basis_grad(self.space.p, ref.bary_to_ref(bary))
        g = np.einsum("qlb,l->qb", G, self.coeffs[self.space.l2g[row]])
        return g @ self.space.invJT[row].T

    def values_at(self, ref_points):
        """Values at reference points on every element, shape ``(n, q)``."""
        phi = ref.basis(self.space.p, ref_points)
        return self.local() @ phi.T

    def grads_at(self, ref_points):
        """Gradients at reference points on every element, shape ``(n, q, 2)``."""
        G = self.space.physical_grads(ref_points)
        return np.einsum("nqla,nl->nqa", G, self.local())

    # norms ----------------------------------------------------------------------------
    def l2_norm(self):
        M = self.space.mass_full()
        return float(np.sqrt(max(self.coeffs @ (M @ self.coeffs), 0.0)))

    def energy_norm(self):
        S = self.space.stiffness_full()
        return float(np.sqrt(max(self.coeffs @ (S @ self.coeffs), 0.0)))

    def l2_norm_elementwise(self, degree=None):
        rule = triangle_rule(2 * self.space.p if degree is None else degree)
        v = self.values_at(rule.points)
        return np.sqrt(self.space.areas * (v**2 @ rule.weights))

    def energy_norm_elementwise(self, degree=None):
        rule = triangle_rule(max(2 * self.space.p - 2, 0) if degree is None else degree)
        g = self.grads_at(rule.points)
        return np.sqrt(self.space.areas * ((g**2).sum(axis=-1) @ rule.weights))

    def inner(self, other):
        self._check(other)
        return float(self.coeffs @ (self.space.mass_full() @ other.coeffs))


def _check_bary(bary):
    bary = np.atleast_2d(np.asarray(bary, dtype=float))
    if np.any(bary < -1e-12) or np.any(np.abs(bary.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError("point outside the element")
    return bary


# errors against exact functions -------------------------------------------------------------
def l2_error(U: FeFunction, u, degree=OVERKILL_DEGREE):
    """``||U - u||`` with ``u(x, y)`` evaluated by the given rule."""
    rule, X = U.space.quadrature_points(degree)
    diff = U.values_at(rule.points) - u(X[..., 0], X[..., 1])
    return float(np.sqrt(np.sum(U.space.areas * (diff**2 @ rule.weights))))


def energy_error(U: FeFunction, grad_u, degree=OVERKILL_DEGREE):
    """``||grad(U - u)||`` with ``grad_u(x, y) -> (gx, gy)``."""
    rule, X = U.space.quadrature_points(degree)
    gx, gy = grad_u(X[..., 0], X[..., 1])
    g = U.grads_at(rule.points)
    diff2 = (g[..., 0] - gx) ** 2 + (g[..., 1] - gy) ** 2
    return float(np.sqrt(np.sum(U.space.areas * (diff2 @ rule.weights))))


# transfer between spaces of one tree ------------------------------------------------------
def _eval_in(F: FeFunction, rows, xy):
    """Evaluate ``F`` at physical points, each inside the element at ``rows``."""
    sp_ = F.space
    r = sp_.to_reference(rows, xy)
    r = np.clip(r, 0.0, 1.0)
    phi = ref.basis(sp_.p, r)  # (k, L)
    return np.einsum("kl,kl->k", phi, F.coeffs[sp_.l2g[rows]])


def locate_leaf(source: FeSpace, element, bary):
    """Descend from ``element`` to the source leaf containing the point.

    Returns the leaf id and the barycentric coordinates in it.
    """
    mesh = source.mesh
    in_src = source._row
    lam = np.array(bary, dtype=float)
    k = int(element)
    while in_src[k] < 0:
        kids = mesh.children[k]
        if kids is None:
            raise ValueError(f"element {k} is neither in the source space nor refined")
        l0, l1, l2 = lam
        if l0 >= l1:
            lam = np.array([l2, l0 - l1, 2.0 * l1])
            k = kids[0]
        else:
            lam = np.array([l1 - l0, l2, 2.0 * l0])
            k = kids[1]
    return k, lam


def transfer(F: FeFunction, target: FeSpace, zero_boundary=True) -> FeFunction:
    """Lagrange interpolation of ``F`` onto another space of the same tree.

    Target leaves at or below a source leaf get the exact prolongation;
    target leaves above source leaves keep the values at their own nodes,
    which drops the fine DOFs.
    """
    source = F.space
    if source.p != target.p:
        raise ValueError(f"degree mismatch: {source.p} vs {target.p}")
    if source.mesh is not target.mesh:
        raise ValueError("spaces belong to different trees")
    if source is target or source.leafset == target.leafset:
        return FeFunction(target, F.coeffs.copy())
    out = np.zeros(target.dim)
    srow = source._row[target.elements]
    same = srow >= 0
    out[target.l2g[same]] = F.coeffs[source.l2g[srow[same]]]

    rest = np.flatnonzero(~same)
    if len(rest):
        mesh = target.mesh
        src_mask = source._row >= 0
        anc = ancestor_in(target.elements[rest], src_mask, mesh.parent_array)
        nodes = ref.node_bary(target.p)
        # target leaf inside a source leaf: evaluate the source polynomial
        up = rest[anc >= 0]
        if len(up):
            X = target.map_points(ref.bary_to_ref(nodes), rows=up)  # (k, L, 2)
            rows = np.repeat(source._row[anc[anc >= 0]], nodes.shape[0])
            vals = _eval_in(F, rows, X.reshape(-1, 2))
            out[target.l2g[up].ravel()] = vals
        # target leaf covering several source leaves: descend per node
        down = rest[anc < 0]
        for r in down:
            k = target.elements[r]
            for i, lam in enumerate(nodes):
                leaf, mu = locate_leaf(source, k, lam)
                out[target.l2g[r, i]] = F.evaluate(source._row[leaf], mu)[0]
    if zero_boundary:
        out[target.boundary] = 0.0
    return FeFunction(target, out)


def cross_load(F: FeFunction, target: FeSpace, common: FeSpace | None = None, degree=None):
    """``b_i = int F Phi_i`` for target basis functions, any two spaces of one tree.

    The integral is split over the common refinement, on whose elements both
    ``F`` and the target basis are polynomials.
    """
    if F.space is target or F.space.leafset == target.leafset:
        return target.mass_full() @ F.coeffs
    if common is None:
        from .mesh import common_refinement

        common = FeSpace(common_refinement(F.space.leafset, target.leafset), target.p)
    Fc = transfer(F, common, zero_boundary=False)
    degree = F.space.p + target.p if degree is None else degree
    rule = triangle_rule(degree)
    X = common.map_points(rule.points)  # (n, q, 2)
    fvals = Fc.values_at(rule.points)
    trow = target._row[ancestor_in(common.elements, target._row >= 0, target.mesh.parent_array)]
    n, q = fvals.shape
    r = target.to_reference(np.repeat(trow, q), X.reshape(-1, 2))
    phi = ref.basis(target.p, r).reshape(n, q, -1)
    local = common.areas[:, None] * np.einsum("q,nq,nqi->ni", rule.weights, fvals, phi)
    return np.bincount(target.l2g[trow].ravel(), weights=local.ravel(), minlength=target.dim)


# snapshot text format -------------------------------------------------------------------
def write_function_snapshot(F: FeFunction, path):
    with open(path, "w") as fh:
        fh.write(f"femzz-fun v1 {F.space.dim}\n")
        for c in F.coeffs:
            fh.write(f"{c:.17g}\n")


def read_function_snapshot(path):
    with open(path) as fh:
        head = fh.readline().split()
        if head[:2] != ["femzz-fun", "v1"]:
            raise ValueError(f"{path}: not a femzz-fun v1 file")
        n = int(head[2])
        vals = np.array([float(fh.readline()) for _ in range(n)])
    return vals


def solve_free(A: SparseSym, rhs_free, **kw):
    return cg_solve(A, rhs_free, **kw)
