import csv
import json
import math

import numpy as np
import pytest

from femzz.benchmarks import (
    ProblemSpec, _half_images, _half_series, boundary_density_ratio, effectivity_index, eoc, exact_error,
    fourier_coefficient, fourier_solution, get_problem, level_mesh, problem_1, problem_2, problem_3,
    uniform_run, uniform_steps, uniform_study, write_study,
)
from femzz.fespace import FeSpace
from femzz.heat import TimeState
from femzz.mesh import macro_mesh


def _laplacian_fd(u, x, y, t, d=1e-4):
    return (u(x + d, y, t) + u(x - d, y, t) + u(x, y + d, t) + u(x, y - d, t) - 4 * u(x, y, t)) / d**2


def _check_source(P, x, y, t):
    dt = 1e-6
    ut = (P.u(x, y, t + dt) - P.u(x, y, t - dt)) / (2 * dt)
    fd = ut - _laplacian_fd(P.u, x, y, t)
    f = P.f(x, y, t)
    scale = np.max(np.abs(f)) + 1e-3
    np.testing.assert_allclose(f, fd, atol=1e-5 * scale, rtol=1e-5)


@pytest.mark.parametrize("make", [problem_1, problem_2])
def test_source_matches_solution_square(make, rng):
    P = make()
    x, y = rng.uniform(-0.9, 0.9, (2, 100))
    for t in (0.013, 0.05, 0.07):
        _check_source(P, x, y, t)


def test_source_matches_solution_lshape(rng):
    P = problem_3()
    r = rng.uniform(0.2, 0.9, 100)
    th = rng.uniform(0.1, 1.5 * math.pi - 0.1, 100)
    x, y = r * np.cos(th), r * np.sin(th)
    for t in (0.3, 0.8):
        _check_source(P, x, y, t)


def test_gradients_match_solution(rng):
    d = 1e-6
    for P in (problem_1(), problem_3()):
        r = rng.uniform(0.2, 0.9, 30)
        th = rng.uniform(0.1, 1.4, 30)
        x, y = r * np.cos(th), r * np.sin(th)
        gx, gy = P.grad_u(x, y, 0.4)
        np.testing.assert_allclose(gx, (P.u(x + d, y, 0.4) - P.u(x - d, y, 0.4)) / (2 * d), atol=1e-7)
        np.testing.assert_allclose(gy, (P.u(x, y + d, 0.4) - P.u(x, y - d, 0.4)) / (2 * d), atol=1e-7)


def test_example_values():
    assert problem_1().u(np.array(0.0), np.array(0.0), 0.5) == pytest.approx(1.0)
    assert problem_2().u(np.array(0.0), np.array(0.0), 0.05) == pytest.approx(0.0, abs=1e-14)
    P = problem_3()
    vals = [abs(float(P.u(np.array(r * math.cos(1.0)), np.array(r * math.sin(1.0)), 1.0))) for r in (0.9, 0.99, 0.999)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-100
    assert float(P.u(np.array(1.0), np.array(0.5), 1.0)) == 0.0
    assert P.u0(np.array([0.3]), np.array([0.4]))[0] == 0.0


def test_problem_registry():
    assert get_problem("p2").T == pytest.approx(0.1)
    assert get_problem("p1", T=0.3).T == 0.3
    with pytest.raises(ValueError):
        get_problem("nope")


# incompatible data ----------------------------------------------------------------------------
def test_fourier_coefficients():
    assert fourier_coefficient(1, 1) == pytest.approx(16 / math.pi**2)
    assert fourier_coefficient(3, 5) == pytest.approx(16 / (15 * math.pi**2))
    for m, n in [(2, 1), (1, 2), (4, 4), (2, 3)]:
        assert fourier_coefficient(m, n) == pytest.approx(0.0, abs=1e-15)


def test_fourier_solution_values():
    P = fourier_solution()
    c = np.array([0.5])
    assert P.u(c, c, 1e-4)[0] == pytest.approx(1.0, abs=1e-3)
    vals = [P.u(c, c, t)[0] for t in (0.01, 0.05, 0.1, 0.5)]
    assert all(a > b > 0 for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(16 / math.pi**2 * math.exp(-2 * math.pi**2 * 0.5), rel=1e-6)
    assert P.u(np.array([0.0]), c, 0.1)[0] == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ValueError):
        P.u(c, c, 0.0)


@pytest.mark.parametrize("t", [0.002, 0.01, 0.04])
def test_images_agree_with_series(t):
    x = np.linspace(0, 1, 41)
    v1, d1 = _half_images(x, t)
    v2, d2 = _half_series(x, t, np.finfo(float).eps)
    np.testing.assert_allclose(v1, v2, atol=1e-12)
    np.testing.assert_allclose(d1, d2, atol=1e-9 / math.sqrt(t))


# error measures --------------------------------------------------------------------------------
def test_eoc_examples():
    h = np.array([0.5, 0.25, 0.125])
    np.testing.assert_allclose(eoc(h**2, h), [2, 2])
    np.testing.assert_allclose(eoc([1.0, 0.5], [1.0, 0.5]), [1.0])
    assert eoc([1.0, 0.3], [1.0, 0.5])[0] == pytest.approx(1.737, abs=1e-3)
    assert eoc([1.0], [1.0]).size == 0
    for vals, hs in [([1, 0], [1, 0.5]), ([1, 2], [1, 1]), ([1, 2, 3], [1, 0.5])]:
        with pytest.raises(ValueError):
            eoc(vals, hs)


def test_effectivity_index():
    assert effectivity_index(2.0, 1.0) == 2.0
    assert effectivity_index(1.0, 0.0) is None


def test_uniform_steps():
    assert uniform_steps(1.0, 0.1, 1, 0.5) == (20, 0.05)
    N, tau = uniform_steps(0.1, 0.1, 2, 2 ** -3.5)
    assert N == math.ceil(0.1 / (0.1 * 2**-7)) and N * tau == pytest.approx(0.1)


def test_level_mesh_sizes():
    for lev in (2, 3, 4, 5):
        assert level_mesh(problem_1(), lev).mesh_size()[1] == pytest.approx(2 ** (-lev / 2))
    assert level_mesh(problem_3(), 3).mesh_size()[1] == pytest.approx(2 ** -1.5)
    with pytest.raises(ValueError):
        level_mesh(problem_1(), -4)


def _polynomial_problem():
    g = lambda x, y: (1 - x**2) * (1 - y**2)  # noqa: E731
    return ProblemSpec(
        "poly", "square", (-1.0, -1.0), (1.0, 1.0), 1.0, lambda x, y, t: 0 * x, lambda x, y: 0 * x,
        lambda x, y, t: t * g(x, y),
        lambda x, y, t: (t * -2 * x * (1 - y**2), t * -2 * y * (1 - x**2)),
    )


def test_exact_error_vanishes_on_representable_solution():
    P = _polynomial_problem()
    S = FeSpace(macro_mesh("square").refine_uniform(2).snapshot(), 4)
    states = [TimeState(n, 0.25 * n, 0.25, S.interpolate(lambda x, y, t=0.25 * n: P.u(x, y, t))) for n in range(5)]
    l2, h1 = exact_error(states, P)
    assert l2 < 1e-12 and h1 < 1e-12
    bad = [TimeState(s.n, s.t, s.tau, s.U * 1.1) for s in states]
    l2b, h1b = exact_error(bad, P)
    assert l2b > 0.01 and h1b > 0.01


def test_small_uniform_run_is_reliable():
    r = uniform_run(problem_1(T=0.25), 1, 3, 0.1, 1)
    assert r.steps == len(r.log) == math.ceil(0.25 / (0.1 * 2**-1.5) - 1e-9)
    assert r.E > 0 and r.Theta > 0 and r.error > 0
    assert r.eta >= max(r.E, r.Theta)
    assert r.initial_error == 0.0
    assert r.reliability_lhs <= r.reliability_rhs
    assert r.ei == pytest.approx(r.eta / r.error)


def test_write_study(tmp_path):
    st = uniform_study(problem_1(T=0.1), 1, [2, 3], 0.1, 1)
    write_study(st, tmp_path)
    with open(tmp_path / "study.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["level"]) for r in rows] == [2, 3]
    assert rows[0]["EOC_E"] == "" and float(rows[1]["EOC_E"]) > 0
    data = json.loads((tmp_path / "study.json").read_text())
    assert data["problem"] == "p1" and len(data["levels"]) == 2
    with open(tmp_path / "level_3.csv") as fh:
        assert len(list(csv.reader(fh))) == st.levels[1].steps + 1


def test_boundary_density_ratio():
    mesh = macro_mesh("square2", (0, 0), (1, 1)).refine_uniform(8)
    assert boundary_density_ratio(mesh.snapshot()) == pytest.approx(1.0)
    S = FeSpace(mesh.snapshot(), 1)
    c = S.leafset.corners().mean(axis=1)
    near = np.minimum(c.min(axis=1), (1 - c).min(axis=1)) < 0.1
    mesh.refine(S.elements[near])
    mesh.refine(FeSpace(mesh.snapshot(), 1).elements[np.flatnonzero(np.minimum(
        mesh.snapshot().corners().mean(axis=1).min(axis=1), (1 - mesh.snapshot().corners().mean(axis=1)).min(axis=1)) < 0.1)])
    assert boundary_density_ratio(mesh.snapshot()) >= 3.9
    with pytest.raises(ValueError):
        boundary_density_ratio(mesh.snapshot(), width=1.0)
