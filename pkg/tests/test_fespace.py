import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from femzz.fespace import (
    FeFunction, FeSpace, energy_error, l2_error, read_function_snapshot, transfer, write_function_snapshot,
)
from femzz.mesh import Mesh, macro_mesh
from femzz.quadrature import triangle_rule
from femzz.reference import basis, node_bary

from conftest import random_refine


def single(P=((0.0, 0.0), (1.0, 0.0), (0.0, 1.0))):
    return Mesh(P, [(1, 2, 0)])


def space_on(mesh, p):
    return FeSpace(mesh.snapshot(), p)


def test_quadrature_monomials_degree17():
    rule = triangle_rule(17)
    x, y = rule.points[:, 0], rule.points[:, 1]
    for a in range(18):
        for b in range(18 - a):
            exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            assert abs(0.5 * rule.weights @ (x**a * y**b) - exact) <= 1e-14


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_basis_is_nodal(p):
    nodes = node_bary(p)
    assert np.allclose(basis(p, nodes[:, 1:]), np.eye(len(nodes)), atol=1e-12)


def test_dimensions():
    assert space_on(macro_mesh("square2", (0, 0), (1, 1)), 1).dim == 4
    s2 = space_on(single(), 2)
    assert s2.dim == 6 and s2.n_local == 6
    s3 = space_on(single(), 3)
    assert s3.dim == 10
    assert s3.free.size == 1  # the single interior node


def test_unsupported_degree():
    with pytest.raises(ValueError):
        space_on(single(), 5)


def test_local_mass_single_triangle():
    P = ((0.0, 0.0), (2.0, 0.0), (0.5, 1.5))
    S = space_on(single(P), 1)
    area = 1.5
    expected = area / 12 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]])
    assert np.allclose(S.local_mass()[0], expected, atol=1e-14)


def test_local_stiffness_unit_right_triangle():
    S = space_on(single(), 1)
    K = S.stiffness_full().toarray()
    # map global numbering back to the vertices (0,0), (1,0), (0,1)
    order = [int(np.flatnonzero(np.all(np.isclose(S.dof_coords, c), axis=1))[0])
             for c in ((0, 0), (1, 0), (0, 1))]
    K = K[np.ix_(order, order)]
    assert np.allclose(K, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]], atol=1e-14)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_mass_and_stiffness_properties(p, rng):
    m = macro_mesh("square")
    random_refine(m, rng, rounds=2)
    S = space_on(m, p)
    M = S.mass_full()
    assert abs(M.sum() - 4.0) < 1e-12
    assert np.allclose(M.sum(axis=1).A1, S.load_vector(lambda x, y: np.ones_like(x)), atol=1e-14)
    Md = M.toarray()
    assert np.allclose(Md, Md.T, atol=1e-15)
    assert np.linalg.eigvalsh(Md).min() > 0
    K = S.stiffness_full()
    assert np.abs(K @ np.ones(S.dim)).max() < 1e-12
    v = rng.standard_normal(S.dim)
    assert v @ (K @ v) >= 0


def test_load_vector_examples():
    S = space_on(single(((0, 0), (3, 0), (0, 2))), 1)
    assert np.allclose(S.load_vector(lambda x, y: 1.0 + 0 * x), 1.0)  # |K|/3 = 1
    assert not np.any(S.load_vector(lambda x, y: 0 * x))


def test_load_of_basis_function_is_mass_column():
    m = macro_mesh("square")
    m.refine_uniform(2)
    S = space_on(m, 2)
    j = S.free[3]
    phi_j = FeFunction(S, np.eye(S.dim)[j])
    rule = triangle_rule(8)
    vals = phi_j.values_at(rule.points)
    b = S.scatter(S.element_load(vals, rule))
    assert np.allclose(b, S.mass_full()[:, j].toarray().ravel(), atol=1e-14)


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_interpolation_reproduces_polynomials(p):
    m = macro_mesh("square")
    m.refine_uniform(2)
    S = space_on(m, p)
    poly = lambda x, y: (1 + x - 2 * y) ** p + x * y ** (p - 1)  # noqa: E731
    U = S.interpolate(poly, zero_boundary=False)
    rule = triangle_rule(2 * p)
    X = S.map_points(rule.points)
    assert np.allclose(U.values_at(rule.points), poly(X[..., 0], X[..., 1]), rtol=1e-12, atol=1e-12)
    row = 5
    g = U.gradient_at(row, [[0.2, 0.3, 0.5]])
    x, y = (np.array([0.2, 0.3, 0.5]) @ S.corners[row])
    h = 1e-6
    fd = [(poly(x + h, y) - poly(x - h, y)) / (2 * h), (poly(x, y + h) - poly(x, y - h)) / (2 * h)]
    assert np.allclose(g[0], fd, rtol=1e-6, atol=1e-6)


def test_interpolate_one_with_boundary():
    S = space_on(macro_mesh("square2", (0, 0), (1, 1)).refine_uniform(3), 2)
    U = S.interpolate(lambda x, y: 1.0 + 0 * x)
    assert np.all(U.coeffs[S.boundary] == 0) and np.all(U.coeffs[S.free] == 1)


def test_evaluate_outside_raises():
    S = space_on(single(), 1)
    with pytest.raises(ValueError):
        S.zero().evaluate(0, [[1.2, -0.2, 0.0]])


def test_interpolation_l2_eoc_two():
    u = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)  # noqa: E731
    errs, hs = [], []
    for g in (4, 6, 8):
        m = macro_mesh("square2", (0, 0), (1, 1)).refine_uniform(g)
        S = space_on(m, 1)
        errs.append(l2_error(S.interpolate(u), u))
        hs.append(m.mesh_size()[1])
    rates = np.diff(np.log(errs)) / np.diff(np.log(hs))
    assert abs(rates[-1] - 2.0) < 0.1


def test_norms():
    S = space_on(macro_mesh("square").refine_uniform(3), 2)
    assert S.zero().l2_norm() == 0 and S.zero().energy_norm() == 0
    c = FeFunction(S, np.full(S.dim, 3.0))
    assert c.energy_norm() < 1e-12
    X = S.interpolate(lambda x, y: x, zero_boundary=False)
    assert X.l2_norm() ** 2 == pytest.approx(4.0 / 3.0, rel=1e-12)
    assert np.sum(X.l2_norm_elementwise() ** 2) == pytest.approx(4.0 / 3.0, rel=1e-12)
    assert np.sum(X.energy_norm_elementwise() ** 2) == pytest.approx(X.energy_norm() ** 2, rel=1e-12)


def test_inner_product_matches_quadrature(rng):
    m = macro_mesh("lshape")
    random_refine(m, rng)
    S = space_on(m, 2)
    F, G = FeFunction(S, rng.standard_normal(S.dim)), FeFunction(S, rng.standard_normal(S.dim))
    rule = triangle_rule(4)
    quad = np.sum(S.areas * ((F.values_at(rule.points) * G.values_at(rule.points)) @ rule.weights))
    assert F.inner(G) == pytest.approx(quad, rel=1e-12)


def test_exact_error_helpers():
    S = space_on(macro_mesh("square").refine_uniform(2), 1)
    U = S.interpolate(lambda x, y: x + 2 * y, zero_boundary=False)
    assert l2_error(U, lambda x, y: x + 2 * y) < 1e-13
    assert energy_error(U, lambda x, y: (np.ones_like(x), 2 * np.ones_like(y))) < 1e-13


def test_galerkin_orthogonality(rng):
    S = space_on(macro_mesh("square").refine_uniform(4), 1)
    b = S.load_vector(lambda x, y: np.exp(x) * np.cos(y))
    from femzz.sparse import cg_solve

    w, _ = cg_solve(S.stiffness(), b[S.free], rel_tol=1e-13)
    W = S.from_free(w)
    for _ in range(5):
        v = np.zeros(S.dim)
        v[S.free] = rng.standard_normal(S.free.size)
        assert W.coeffs @ (S.stiffness_full() @ v) == pytest.approx(b @ v, rel=1e-9)


# transfer ------------------------------------------------------------------------------------
@pytest.mark.parametrize("p", [1, 2, 3])
def test_transfer_refine_only_is_exact(p, rng):
    m = macro_mesh("square").refine_uniform(2)
    S0 = space_on(m, p)
    U = FeFunction(S0, rng.standard_normal(S0.dim))
    U.coeffs[S0.boundary] = 0
    random_refine(m, rng, rounds=2)
    S1 = space_on(m, p)
    V = transfer(U, S1)
    from femzz.mesh import common_refinement

    C = FeSpace(common_refinement(S0.leafset, S1.leafset), p)
    diff = transfer(V, C).coeffs - transfer(U, C).coeffs
    assert np.abs(diff).max() < 1e-12 * np.abs(U.coeffs).max()


def test_transfer_identity_and_degree_mismatch():
    S = space_on(macro_mesh("square").refine_uniform(2), 2)
    U = S.interpolate(lambda x, y: np.cos(x + y))
    assert np.array_equal(transfer(U, S).coeffs, U.coeffs)
    with pytest.raises(ValueError):
        transfer(U, space_on(S.mesh, 1))


def test_coarsen_transfer_linear_exact():
    m = macro_mesh("square").refine_uniform(4)
    S = space_on(m, 1)
    U = S.interpolate(lambda x, y: 2 * x - y + 0.5, zero_boundary=False)
    m.coarsen(m.coarsenable_patches())
    T = space_on(m, 1)
    V = transfer(U, T, zero_boundary=False)
    assert np.allclose(V.coeffs, 2 * T.dof_coords[:, 0] - T.dof_coords[:, 1] + 0.5, atol=1e-13)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.integers(1, 3))
def test_transfer_matches_pointwise_evaluation(seed, p):
    rng = np.random.default_rng(seed)
    m = macro_mesh("square").refine_uniform(2)
    random_refine(m, rng, rounds=2)
    S0 = space_on(m, p)
    U = FeFunction(S0, rng.standard_normal(S0.dim))
    patches = m.coarsenable_patches()
    m.coarsen(patches[::2])
    random_refine(m, rng, rounds=1, frac=0.2)
    S1 = space_on(m, p)
    V = transfer(U, S1, zero_boundary=False)
    # oracle: brute-force point location over the old leaves
    for i in rng.choice(S1.dim, size=10, replace=False):
        x = S1.dof_coords[i]
        P = S0.corners
        T = np.linalg.solve(S0.jac, (x - P[:, 0])[:, :, None])[..., 0]
        inside = np.flatnonzero((T.min(axis=1) > -1e-12) & (T.sum(axis=1) < 1 + 1e-12))
        r = inside[0]
        lam = np.array([1 - T[r].sum(), T[r, 0], T[r, 1]]).clip(0, 1)
        assert V.coeffs[i] == pytest.approx(U.evaluate(r, lam / lam.sum())[0], abs=1e-10)


def test_function_snapshot_roundtrip(tmp_path):
    S = space_on(macro_mesh("square").refine_uniform(2), 2)
    U = S.interpolate(lambda x, y: np.exp(x * y) / 3)
    path = tmp_path / "u.txt"
    write_function_snapshot(U, path)
    assert path.read_text().splitlines()[0] == f"femzz-fun v1 {S.dim}"
    assert np.array_equal(read_function_snapshot(path), U.coeffs)
