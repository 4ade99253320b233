"""Conforming triangulations stored as a newest-vertex bisection forest.

Every element keeps its vertex triple ``(v0, v1, v2)``; the refinement edge is
``(v0, v1)`` and ``v2`` is the newest vertex. Bisection creates the midpoint
``m`` of the refinement edge and the children

    child 0 (K+) = (v2, v0, m),    child 1 (K-) = (v1, v2, m).

The tree is never pruned. Coarsening only re-activates a parent, so a later
refinement revives the same child ids and midpoint vertex. Two leaf sets taken
at different times therefore live in one tree, which is what the cross-mesh
quantities need.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class MeshError(ValueError):
    pass


def _key(a, b):
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class Patch:
    """Leaves around a bisection vertex that can be un-bisected together."""

    vertex: int
    parents: tuple

    def children(self, mesh):
        return tuple(c for P in self.parents for c in mesh.children[P])


@dataclass
class MutationReport:
    bisected: list = field(default_factory=list)
    coarsened: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def n_bisections(self):
        return len(self.bisected)


class LeafSet:
    """Immutable snapshot of the leaves of a :class:`Mesh`."""

    def __init__(self, mesh, elements):
        self.mesh = mesh
        self.elements = np.asarray(sorted(elements), dtype=np.int64)
        self.elements.setflags(write=False)
        self.tri = mesh.elem_vertices[self.elements]
        self.key = self.elements.tobytes()

    def __len__(self):
        return len(self.elements)

    def __eq__(self, other):
        return isinstance(other, LeafSet) and other.mesh is self.mesh and other.key == self.key

    def __hash__(self):
        return hash(self.key)

    @property
    def coords(self):
        return self.mesh.coords

    def corners(self):
        """Vertex coordinates per leaf, shape ``(n, 3, 2)``."""
        return self.mesh.coords[self.tri]

    def areas(self):
        return element_areas(self.corners())

    def mask(self):
        m = np.zeros(self.mesh.n_elements, dtype=bool)
        m[self.elements] = True
        return m


def element_areas(P):
    d1 = P[:, 1] - P[:, 0]
    d2 = P[:, 2] - P[:, 0]
    return 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def edge_lengths(P):
    """Edge lengths, column ``i`` is the edge opposite vertex ``i``."""
    return np.column_stack([
        np.linalg.norm(P[:, 2] - P[:, 1], axis=1),
        np.linalg.norm(P[:, 0] - P[:, 2], axis=1),
        np.linalg.norm(P[:, 1] - P[:, 0], axis=1),
    ])


class Mesh:
    """Bisection forest over a macro triangulation.

    Parameters
    ----------
    coords : (nv, 2) array
        Macro vertex coordinates.
    triangles : (nt, 3) int array
        Macro elements; ``(t[0], t[1])`` is each element's refinement edge.
        The labelling must be compatible (each interior refinement edge is
        the refinement edge of both neighbours, or lies on the boundary).
    """

    def __init__(self, coords, triangles):
        coords = np.asarray(coords, dtype=float)
        triangles = np.asarray(triangles, dtype=np.int64)
        if not np.all(np.isfinite(coords)):
            raise MeshError("non-finite vertex coordinates")
        self._coords = [tuple(c) for c in coords]
        self._verts = [tuple(int(v) for v in t) for t in triangles]
        self.parent = [-1] * len(triangles)
        self.children = [None] * len(triangles)
        self.generation = [0] * len(triangles)
        self._leaf = [True] * len(triangles)
        self.roots = list(range(len(triangles)))
        self.edge_mid = {}
        self._mid_edge = {}
        self._edge_leaves = {}
        for k, t in enumerate(self._verts):
            for e in self._element_edges(t):
                self._edge_leaves.setdefault(e, []).append(k)
        self._cache = {}
        if np.any(element_areas(coords[triangles]) <= 0.0):
            raise MeshError("degenerate macro element")
        self.check_conforming()

    # basic tables -----------------------------------------------------------------
    @staticmethod
    def _element_edges(t):
        return (_key(t[1], t[2]), _key(t[2], t[0]), _key(t[0], t[1]))

    @property
    def n_elements(self):
        return len(self._verts)

    @property
    def coords(self):
        c = self._cache.get("coords")
        if c is None:
            c = np.array(self._coords, dtype=float)
            c.setflags(write=False)
            self._cache["coords"] = c
        return c

    @property
    def elem_vertices(self):
        v = self._cache.get("verts")
        if v is None:
            v = np.array(self._verts, dtype=np.int64).reshape(-1, 3)
            v.setflags(write=False)
            self._cache["verts"] = v
        return v

    @property
    def parent_array(self):
        p = self._cache.get("parent")
        if p is None:
            p = np.array(self.parent, dtype=np.int64)
            self._cache["parent"] = p
        return p

    def is_leaf(self, k):
        return self._leaf[k]

    def leaves(self):
        return [k for k, f in enumerate(self._leaf) if f]

    @property
    def n_leaves(self):
        return sum(self._leaf)

    def snapshot(self) -> LeafSet:
        s = self._cache.get("snapshot")
        if s is None:
            s = LeafSet(self, self.leaves())
            self._cache["snapshot"] = s
        return s

    def copy(self):
        return copy.deepcopy(self)

    def __deepcopy__(self, memo):
        new = Mesh.__new__(Mesh)
        memo[id(self)] = new
        for name, val in self.__dict__.items():
            setattr(new, name, {} if name == "_cache" else copy.deepcopy(val, memo))
        return new

    def _invalidate(self, geometry=False):
        keep = {} if geometry else {k: v for k, v in self._cache.items() if k in ("coords", "verts", "parent")}
        self._cache = keep

    # refinement -------------------------------------------------------------------
    def _midpoint(self, a, b):
        e = _key(a, b)
        m = self.edge_mid.get(e)
        if m is None:
            xa, xb = self._coords[a], self._coords[b]
            m = len(self._coords)
            self._coords.append((0.5 * (xa[0] + xb[0]), 0.5 * (xa[1] + xb[1])))
            self.edge_mid[e] = m
            self._mid_edge[m] = e
            self._cache.pop("coords", None)
        return m

    def _set_leaf(self, k, flag):
        t = self._verts[k]
        for e in self._element_edges(t):
            if flag:
                self._edge_leaves.setdefault(e, []).append(k)
            else:
                lst = self._edge_leaves[e]
                lst.remove(k)
                if not lst:
                    del self._edge_leaves[e]
        self._leaf[k] = flag

    def _bisect(self, k, report):
        v0, v1, v2 = self._verts[k]
        if self.children[k] is None:
            m = self._midpoint(v0, v1)
            c0 = len(self._verts)
            self._verts.append((v2, v0, m))
            self._verts.append((v1, v2, m))
            g = self.generation[k] + 1
            self.parent += [k, k]
            self.children += [None, None]
            self.generation += [g, g]
            self._leaf += [False, False]
            self.children[k] = (c0, c0 + 1)
            self._cache.pop("verts", None)
            self._cache.pop("parent", None)
        self._set_leaf(k, False)
        for c in self.children[k]:
            self._set_leaf(c, True)
        report.bisected.append(k)

    def _refine_element(self, k, report):
        while self._leaf[k]:
            v0, v1, _ = self._verts[k]
            e = _key(v0, v1)
            nbrs = [j for j in self._edge_leaves.get(e, ()) if j != k]
            if not nbrs:
                self._bisect(k, report)
                return
            j = nbrs[0]
            w0, w1, _ = self._verts[j]
            if _key(w0, w1) == e:
                self._bisect(k, report)
                self._bisect(j, report)
                return
            self._refine_element(j, report)

    def refine(self, marked: Iterable[int]) -> MutationReport:
        """Bisect every marked leaf and close the mesh conformingly."""
        marked = sorted(set(int(k) for k in marked))
        for k in marked:
            if k < 0 or k >= self.n_elements or not self._leaf[k]:
                raise MeshError(f"element {k} is not a leaf")
        report = MutationReport()
        for k in marked:
            if self._leaf[k]:
                self._refine_element(k, report)
        if report.bisected:
            self._invalidate()
        return report

    def refine_uniform(self, times=1):
        for _ in range(times):
            self.refine(self.leaves())
        return self

    # coarsening -------------------------------------------------------------------
    def _vertex_star(self):
        star = {}
        for k, f in enumerate(self._leaf):
            if f:
                for v in self._verts[k]:
                    star.setdefault(v, []).append(k)
        return star

    def _patch_at(self, m, star_m):
        e = self._mid_edge.get(m)
        if e is None or len(star_m) not in (2, 4):
            return None
        parents = []
        for K in star_m:
            if self._verts[K][2] != m:
                return None
            P = self.parent[K]
            if P < 0 or _key(*self._verts[P][:2]) != e:
                return None
            if P not in parents:
                parents.append(P)
        if 2 * len(parents) != len(star_m):
            return None
        for P in parents:
            if not all(self._leaf[c] for c in self.children[P]):
                return None
        return Patch(m, tuple(sorted(parents)))

    def coarsenable_patches(self):
        """All patches whose joint un-bisection keeps the mesh conforming."""
        star = self._vertex_star()
        patches = []
        for m in sorted(star):
            p = self._patch_at(m, star[m])
            if p is not None:
                patches.append(p)
        return patches

    def coarsen(self, patches) -> MutationReport:
        """Replace each patch's sibling pairs by their parents.

        Patches invalidated by an earlier patch of the same call are skipped
        and listed in ``report.skipped``.
        """
        report = MutationReport()
        for patch in patches:
            star_m = [k for k in self._edge_star_candidates(patch)]
            current = self._patch_at(patch.vertex, star_m)
            if current is None or current.parents != tuple(sorted(patch.parents)):
                report.skipped.append(patch)
                continue
            for P in current.parents:
                for c in self.children[P]:
                    self._set_leaf(c, False)
                self._set_leaf(P, True)
            report.coarsened.append(current)
        if report.coarsened:
            self._invalidate()
        return report

    def _edge_star_candidates(self, patch):
        m = patch.vertex
        seen = set()
        for P in patch.parents:
            for c in self.children[P] or ():
                for e in self._element_edges(self._verts[c]):
                    if m in e:
                        seen.update(self._edge_leaves.get(e, ()))
        return sorted(k for k in seen if m in self._verts[k])

    def set_leaves(self, leafset: LeafSet):
        """Restore a leaf set previously taken from this tree."""
        target = set(int(k) for k in leafset.elements)
        for k in [k for k, f in enumerate(self._leaf) if f and k not in target]:
            self._set_leaf(k, False)
        for k in target:
            if not self._leaf[k]:
                self._set_leaf(k, True)
        self._invalidate()

    # geometry ---------------------------------------------------------------------
    def total_area(self):
        return float(self.snapshot().areas().sum())

    def mesh_size(self):
        """Per-leaf longest edge and its maximum."""
        hK = edge_lengths(self.snapshot().corners()).max(axis=1)
        return hK, float(hK.max())

    def shape_regularity(self):
        return shape_regularity(self.snapshot().corners())

    def boundary_edges(self):
        return [e for e, lst in self._edge_leaves.items() if len(lst) == 1]

    def check_conforming(self):
        """Raise :class:`MeshError` on a hanging node or broken ancestry."""
        for e, lst in self._edge_leaves.items():
            if len(lst) > 2:
                raise MeshError(f"edge {e} shared by {len(lst)} leaves")
        for e, lst in self._edge_leaves.items():
            if len(lst) == 1:
                m = self.edge_mid.get(e)
                if m is not None and any(m in self._verts[k] for k in self._vertex_leaves(m)):
                    # a leaf uses the midpoint of this edge, so the edge hangs
                    raise MeshError(f"hanging node {m} on edge {e}")
        for k, f in enumerate(self._leaf):
            if f:
                j = k
                while self.parent[j] >= 0:
                    j = self.parent[j]
                if j not in self.roots:
                    raise MeshError(f"leaf {k} does not reach a root")
        return True

    def _vertex_leaves(self, m):
        star = self._cache.get("star")
        if star is None:
            star = self._vertex_star()
            self._cache["star"] = star
        return star.get(m, ())


def inradius(P):
    L = edge_lengths(P)
    return element_areas(P) / (0.5 * L.sum(axis=1))


def shape_regularity(P):
    """min over elements of inradius / longest edge."""
    P = np.asarray(P, dtype=float).reshape(-1, 3, 2)
    A = element_areas(P)
    if np.any(A <= 1e-300):
        raise MeshError("degenerate (zero-area) element")
    return float(np.min(inradius(P) / edge_lengths(P).max(axis=1)))


# macro triangulations --------------------------------------------------------------
def macro_mesh(domain="square", lower=(-1.0, -1.0), upper=(1.0, 1.0)) -> Mesh:
    """Macro triangulations.

    ``square``: 4 triangles meeting at the centre, refinement edges on the
    boundary. ``square2``: 2 triangles sharing the diagonal as refinement edge.
    ``lshape``: (-1,1)^2 minus [0,1]x[-1,0], 6 triangles.
    """
    (a, b), (c, d) = lower, upper
    if domain == "square":
        xm, ym = 0.5 * (a + c), 0.5 * (b + d)
        coords = [(a, b), (c, b), (c, d), (a, d), (xm, ym)]
        tris = [(0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)]
    elif domain == "square2":
        coords = [(a, b), (c, b), (c, d), (a, d)]
        tris = [(0, 2, 3), (2, 0, 1)]
    elif domain == "lshape":
        coords = [(-1, -1), (0, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
        tris = [(0, 3, 2), (3, 0, 1), (2, 6, 5), (6, 2, 3), (3, 7, 6), (7, 3, 4)]
    else:
        raise MeshError(f"unknown domain {domain!r}")
    return Mesh(coords, tris)


def domain_area(domain, lower=(-1.0, -1.0), upper=(1.0, 1.0)):
    if domain == "lshape":
        return 3.0
    return (upper[0] - lower[0]) * (upper[1] - lower[1])


def common_refinement(A: LeafSet, B: LeafSet) -> LeafSet:
    """Finer of the two leaves along every branch of the shared tree."""
    if A.mesh is not B.mesh:
        raise MeshError("leaf sets belong to different trees")
    if A == B:
        return A
    mesh = A.mesh
    in_a, in_b = A.mask(), B.mask()
    parent = mesh.parent_array
    out = list(np.flatnonzero(in_a & in_b))

    def below(k, other):
        j = k
        while j >= 0:
            if other[j]:
                return True
            j = parent[j]
        return False

    for k in A.elements:
        if not in_b[k] and below(k, in_b):
            out.append(k)
    for k in B.elements:
        if not in_a[k] and below(k, in_a):
            out.append(k)
    return LeafSet(mesh, out)


def ancestor_in(elements, member_mask, parent):
    """For each element, the first ancestor-or-self flagged in ``member_mask``.

    Returns -1 where none exists.
    """
    elements = np.asarray(elements, dtype=np.int64)
    out = np.full(len(elements), -1, dtype=np.int64)
    cur = elements.copy()
    active = np.ones(len(elements), dtype=bool)
    while active.any():
        hit = active & member_mask[np.maximum(cur, 0)] & (cur >= 0)
        out[hit] = cur[hit]
        active &= ~hit
        active &= cur >= 0
        cur = np.where(active, parent[np.maximum(cur, 0)], cur)
        active &= cur >= 0
    return out


# snapshot text format ---------------------------------------------------------------
def write_mesh_snapshot(leafset: LeafSet, path):
    """Write ``femzz-mesh v1 <nv> <nt>`` followed by vertices and triangles."""
    used, inv = np.unique(leafset.tri, return_inverse=True)
    tri = inv.reshape(-1, 3)
    xy = leafset.coords[used]
    with open(path, "w") as fh:
        fh.write(f"femzz-mesh v1 {len(used)} {len(tri)}\n")
        for x, y in xy:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for t in tri:
            fh.write(f"{t[0]} {t[1]} {t[2]}\n")


def read_mesh_snapshot(path):
    with open(path) as fh:
        head = fh.readline().split()
        if head[:2] != ["femzz-mesh", "v1"]:
            raise MeshError(f"{path}: not a femzz-mesh v1 file")
        nv, nt = int(head[2]), int(head[3])
        xy = np.array([[float(s) for s in fh.readline().split()] for _ in range(nv)]).reshape(nv, 2)
        tri = np.array([[int(s) for s in fh.readline().split()] for _ in range(nt)], dtype=np.int64).reshape(nt, 3)
    return xy, tri
