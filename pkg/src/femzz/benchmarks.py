"""Benchmark problems, exact-error evaluation, EOC, effectivity and uniform studies."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import erf

from .fespace import FeFunction, FeSpace, l2_error, transfer
from .heat import TimeState, backward_euler_step, common_space
from .indicators import (
    CSV_COLUMNS,
    EstimatorAccumulator,
    IndicatorEngine,
    IndicatorSettings,
    poincare_constant,
)
from .mesh import Mesh, macro_mesh
from .quadrature import OVERKILL_DEGREE, gauss_interval

PI = math.pi


@dataclass
class SeparableTerm:
    """One term ``a(t) g(x, y)`` of a separable exact solution."""

    a: Callable
    g: Callable
    grad_g: Callable


@dataclass
class ProblemSpec:
    """A heat problem ``u_t - Lap u = f`` with homogeneous Dirichlet data."""

    name: str
    domain: str
    lower: tuple
    upper: tuple
    T: float
    f: Callable
    u0: Callable
    u: Callable | None = None
    grad_u: Callable | None = None
    terms: list = field(default_factory=list)
    f_is_zero: bool = False
    error_degree: int = OVERKILL_DEGREE

    @property
    def has_exact(self):
        return self.u is not None

    def macro_mesh(self) -> Mesh:
        return macro_mesh(self.domain, self.lower, self.upper)

    def poincare_constant(self):
        return poincare_constant(self.lower, self.upper)


# Gaussian bump ----------------------------------------------------------------------------
def _bump(x, y):
    return np.exp(-10.0 * (x * x + y * y))


def _bump_grad(x, y):
    g = _bump(x, y)
    return -20.0 * x * g, -20.0 * y * g


def _bump_lap(x, y):
    r2 = x * x + y * y
    return (400.0 * r2 - 40.0) * _bump(x, y)


def _bump_problem(name, omega, T):
    a = lambda t: math.sin(omega * t)
    da = lambda t: omega * math.cos(omega * t)

    def u(x, y, t):
        return a(t) * _bump(x, y)

    def grad_u(x, y, t):
        gx, gy = _bump_grad(x, y)
        return a(t) * gx, a(t) * gy

    def f(x, y, t):
        return da(t) * _bump(x, y) - a(t) * _bump_lap(x, y)

    return ProblemSpec(
        name, "square", (-1.0, -1.0), (1.0, 1.0), T, f, lambda x, y: np.zeros_like(x), u, grad_u,
        terms=[SeparableTerm(a, _bump, _bump_grad)],
    )


def problem_1(T=1.0) -> ProblemSpec:
    """``u = sin(pi t) exp(-10 |x|^2)`` on (-1,1)^2."""
    return _bump_problem("p1", PI, T)


def problem_2(T=0.1) -> ProblemSpec:
    """``u = sin(20 pi t) exp(-10 |x|^2)`` on (-1,1)^2, fast in time."""
    return _bump_problem("p2", 20.0 * PI, T)


# re-entrant corner ------------------------------------------------------------------------
def _polar(x, y):
    r = np.hypot(x, y)
    th = np.mod(np.arctan2(y, x), 2.0 * PI)  # (0, 3pi/2) inside the L
    return r, th


def _mollifier(r2):
    """``exp(-1/(1 - r^2))`` and ``w = 1/(1 - r^2)``, zero outside the unit disc."""
    inside = r2 < 1.0
    w = np.where(inside, 1.0 / np.where(inside, 1.0 - r2, 1.0), 0.0)
    m = np.where(inside, np.exp(-w), 0.0)
    return m, w


def corner_parts(x, y):
    """Values and derivatives of the harmonic factor ``s`` and the mollifier ``m``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r, th = _polar(x, y)
    r2 = r * r
    s = r ** (2.0 / 3.0) * np.sin(2.0 * th / 3.0)
    rs = np.where(r > 0, r, 1.0)
    c = np.where(r > 0, (2.0 / 3.0) * rs ** (-1.0 / 3.0), 0.0)
    sr, st = c * np.sin(2.0 * th / 3.0), c * np.cos(2.0 * th / 3.0)
    ct, sn = np.cos(th), np.sin(th)
    sx = sr * ct - st * sn
    sy = sr * sn + st * ct
    m, w = _mollifier(r2)
    mx, my = -2.0 * m * w**2 * x, -2.0 * m * w**2 * y
    lap_m = m * (4.0 * r2 * w**4 - 8.0 * r2 * w**3 - 4.0 * w**2)
    return s, (sx, sy), m, (mx, my), lap_m


def _corner(x, y):
    s, _, m, _, _ = corner_parts(x, y)
    return s * m


def _corner_grad(x, y):
    s, (sx, sy), m, (mx, my), _ = corner_parts(x, y)
    return m * sx + s * mx, m * sy + s * my


def problem_3(T=1.0) -> ProblemSpec:
    """``u = t r^{2/3} sin(2 th / 3) exp(-1/(1 - r^2))`` on the L-shaped domain."""

    def u(x, y, t):
        return t * _corner(x, y)

    def grad_u(x, y, t):
        gx, gy = _corner_grad(x, y)
        return t * gx, t * gy

    def f(x, y, t):
        s, (sx, sy), m, (mx, my), lap_m = corner_parts(x, y)
        return s * m - t * (s * lap_m + 2.0 * (sx * mx + sy * my))

    return ProblemSpec(
        "p3", "lshape", (-1.0, -1.0), (1.0, 1.0), T, f, lambda x, y: np.zeros_like(x), u, grad_u,
        terms=[SeparableTerm(lambda t: t, _corner, _corner_grad)],
    )


# incompatible data ------------------------------------------------------------------------
def fourier_coefficient(m, n):
    return 4.0 / (n * m * PI**2) * (1 - math.cos(m * PI) - math.cos(n * PI) + math.cos(n * PI) * math.cos(m * PI))


def _series_modes(t, tol):
    """Odd ``m`` with ``exp(-m^2 pi^2 t) >= tol``."""
    if t <= 0:
        raise ValueError("the Fourier series is only evaluated for t > 0")
    m_max = max(1, int(math.sqrt(-math.log(tol) / (PI**2 * t))) + 1)
    return np.arange(1, m_max + 1, 2, dtype=float)


def _half_series(x, t, tol):
    """``v = (4/pi) sum_odd sin(m pi x) e^{-m^2 pi^2 t} / m`` and ``dv/dx``.

    The solution is ``v(x1, t) v(x2, t)`` because ``C_mn = (4/pi)^2 / (mn)``
    on odd pairs.
    """
    m = _series_modes(t, tol)
    x = np.asarray(x, dtype=float)
    v = np.zeros_like(x)
    dv = np.zeros_like(x)
    for mk in m:
        e = math.exp(-mk * mk * PI * PI * t) * 4.0 / PI
        v += e / mk * np.sin(mk * PI * x)
        dv += e * PI * np.cos(mk * PI * x)
    return v, dv


def _half_images(x, t, J=3):
    """Same ``v`` and ``dv/dx`` from the odd 2-periodic extension of the data.

    Sums heat-kernel convolutions of the unit intervals ``(2j, 2j+1)`` minus
    ``(2j-1, 2j)``; for ``t < 0.05`` three image pairs give round-off accuracy
    at a fraction of the cost of the series.
    """
    x = np.asarray(x, dtype=float)
    s = 2.0 * math.sqrt(t)
    c = 2.0 / (math.sqrt(PI) * s)
    v = np.zeros_like(x)
    dv = np.zeros_like(x)
    for j in range(-J, J + 1):
        for shift, w in ((0, 2.0), (1, -1.0), (-1, -1.0)):
            z = (x - 2 * j - shift) / s
            v += w * erf(z)
            dv += w * c * np.exp(-z * z)
    return 0.5 * v, 0.5 * dv


IMAGES_BELOW = 0.05


def _half_solution(x, t, tol):
    if t <= 0:
        raise ValueError("the Fourier series is only evaluated for t > 0")
    if t < IMAGES_BELOW and tol <= 1e-15:
        return _half_images(x, t)
    return _half_series(x, t, tol)


def fourier_solution(tol=np.finfo(float).eps, T=0.1) -> ProblemSpec:
    """``u_0 = 1``, ``f = 0`` on (0,1)^2 with the series solution.

    Modes are dropped once ``exp(-m^2 pi^2 t)`` falls below ``tol``. At
    machine-precision ``tol`` and small ``t``, where thousands of modes would
    be needed, the equivalent image sum is evaluated instead.
    """

    def u(x, y, t):
        vx, _ = _half_solution(x, t, tol)
        vy, _ = _half_solution(y, t, tol)
        return vx * vy

    def grad_u(x, y, t):
        vx, dx = _half_solution(x, t, tol)
        vy, dy = _half_solution(y, t, tol)
        return dx * vy, vx * dy

    return ProblemSpec(
        "fourier", "square2", (0.0, 0.0), (1.0, 1.0), T,
        lambda x, y, t: np.zeros_like(x), lambda x, y: np.ones_like(x), u, grad_u,
        f_is_zero=True, error_degree=10,
    )


PROBLEMS = {"p1": problem_1, "p2": problem_2, "p3": problem_3, "fourier": fourier_solution}


def get_problem(name, T=None) -> ProblemSpec:
    try:
        make = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return make() if T is None else make(T=T)


# exact error --------------------------------------------------------------------------------
class ErrorIntegrator:
    """Accumulates ``int ||U - u||_a^2 dt`` over the piecewise-linear extension.

    Each step uses ``n_gauss`` Gauss points in time and the ``degree`` rule in
    space on the common refinement of the two meshes. For separable
    solutions the spatial integrals against ``g_k`` are cached per space.
    """

    def __init__(self, problem: ProblemSpec, degree=None, n_gauss=5):
        if not problem.has_exact:
            raise ValueError(f"problem {problem.name} has no exact solution")
        self.problem = problem
        self.degree = problem.error_degree if degree is None else degree
        self.n_gauss = n_gauss
        self.total2 = 0.0
        self._sep = {}
        self._commons = {}

    def _separable_data(self, space: FeSpace):
        key = space.leafset.key
        if key not in self._sep:
            if len(self._sep) > 4:
                self._sep.clear()
            rule, X = space.quadrature_points(self.degree)
            G = space.physical_grads(rule.points)  # (n, q, L, 2)
            wq = space.areas[:, None] * rule.weights[None, :]
            grads = [t.grad_g(X[..., 0], X[..., 1]) for t in self.problem.terms]
            c = []
            for gx, gy in grads:
                loc = np.einsum("nq,nqla,nqa->nl", wq, G, np.stack([gx, gy], axis=-1))
                c.append(space.scatter(loc))
            K = len(grads)
            gram = np.empty((K, K))
            for i in range(K):
                for j in range(K):
                    gram[i, j] = np.sum(wq * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]))
            self._sep[key] = (np.array(c), gram)
        return self._sep[key]

    def step_integral(self, t0, U0: FeFunction, t1, U1: FeFunction):
        """``int_{t0}^{t1} ||U(t) - u(t)||_a^2 dt`` for one step."""
        C = common_space(U0.space, U1.space, cache=self._commons)
        if len(self._commons) > 4:
            self._commons.clear()
        a = transfer(U0, C, zero_boundary=False).coeffs
        b = transfer(U1, C, zero_boundary=False).coeffs
        s, w = gauss_interval(self.n_gauss)
        tau = t1 - t0
        if self.problem.terms:
            S = C.stiffness_full()
            Sa, Sb = S @ a, S @ b
            aa, ab, bb = a @ Sa, a @ Sb, b @ Sb
            c, gram = self._separable_data(C)
            ca, cb = c @ a, c @ b
            total = 0.0
            for sk, wk in zip(s, w):
                t = t0 + sk * tau
                l0, l1 = 1.0 - sk, sk
                coef = np.array([term.a(t) for term in self.problem.terms])
                e2 = l0 * l0 * aa + 2 * l0 * l1 * ab + l1 * l1 * bb
                e2 += -2.0 * coef @ (l0 * ca + l1 * cb) + coef @ gram @ coef
                total += wk * max(e2, 0.0)
            return total * tau
        rule, X = C.quadrature_points(self.degree)
        ga = FeFunction(C, a).grads_at(rule.points)
        gb = FeFunction(C, b).grads_at(rule.points)
        total = 0.0
        for sk, wk in zip(s, w):
            t = t0 + sk * tau
            ux, uy = self.problem.grad_u(X[..., 0], X[..., 1], t)
            g = (1.0 - sk) * ga + sk * gb
            d2 = (g[..., 0] - ux) ** 2 + (g[..., 1] - uy) ** 2
            total += wk * float(np.sum(C.areas * (d2 @ rule.weights)))
        return total * tau

    def step(self, t0, U0, t1, U1):
        self.total2 += self.step_integral(t0, U0, t1, U1)
        return self.total

    @property
    def total(self):
        return math.sqrt(self.total2)

    def l2_at(self, U: FeFunction, t):
        u = self.problem.u
        return l2_error(U, lambda x, y: u(x, y, t), degree=self.degree)


def exact_error(states, problem: ProblemSpec, t_m=None, degree=None):
    """``(||U^N - u(t_N)||, ||U - u||_{L2(0, t_N; H1_0)})`` from a list of states."""
    ei = ErrorIntegrator(problem, degree=degree)
    last = states[0]
    for s in states[1:]:
        if t_m is not None and s.t > t_m + 1e-12:
            break
        ei.step(last.t, last.U, s.t, s.U)
        last = s
    return ei.l2_at(last.U, last.t), ei.total


def initial_error(U0: FeFunction, problem: ProblemSpec, degree=None):
    """``||U^0 - u_0||``."""
    return l2_error(U0, problem.u0, degree=problem.error_degree if degree is None else degree)


# convergence measures ---------------------------------------------------------------------
def eoc(values, sizes):
    """Local slopes ``log(a_{i+1}/a_i) / log(h_{i+1}/h_i)``."""
    a = np.asarray(values, dtype=float)
    h = np.asarray(sizes, dtype=float)
    if a.shape != h.shape:
        raise ValueError("values and sizes differ in length")
    if np.any(a <= 0) or np.any(h <= 0):
        raise ValueError("EOC needs positive values and sizes")
    if np.any(np.diff(h) >= 0):
        raise ValueError("sizes must be strictly decreasing")
    return np.log(a[1:] / a[:-1]) / np.log(h[1:] / h[:-1])


def effectivity_index(eta, error):
    """``eta / error``; ``None`` when the error vanishes."""
    if error <= 0:
        return None
    return eta / error


# uniform studies ----------------------------------------------------------------------------
def level_size(level):
    return 2.0 ** (-level / 2.0)


def level_mesh(problem: ProblemSpec, level) -> Mesh:
    """Uniformly bisected macro mesh with ``h = 2^{-level/2}``."""
    mesh = problem.macro_mesh()
    h0 = mesh.mesh_size()[1]
    g = int(round(2.0 * math.log2(h0) + level))
    if g < 0:
        raise ValueError(f"level {level} is coarser than the macro mesh")
    mesh.refine_uniform(g)
    h = mesh.mesh_size()[1]
    if abs(h - level_size(level)) > 1e-12 * h:
        raise ValueError(f"level {level}: mesh size {h} does not match 2^(-{level}/2)")
    return mesh


def uniform_steps(T, c, k, h):
    """Number of steps and step size ``T / N`` with ``N = ceil(T / (c h^k))``."""
    tau = c * h**k
    N = max(1, int(math.ceil(T / tau - 1e-9)))
    return N, T / N


@dataclass
class LevelResult:
    level: int
    h: float
    tau: float
    steps: int
    dim: int
    E: float
    Theta: float
    Theta_theta: float
    Theta_alt: float
    Theta_gamma_tilde: float
    Theta_theta_tilde: float
    eta: float
    eta_alt: float
    error: float
    error_final_l2: float
    initial_error: float
    ei: float | None
    seconds: float
    log: list = field(default_factory=list, repr=False)

    @property
    def reliability_lhs(self):
        return math.sqrt(0.5 * self.error_final_l2**2 + self.error**2)

    @property
    def reliability_rhs(self):
        return self.eta + self.initial_error / math.sqrt(2.0)


def uniform_run(problem: ProblemSpec, p, level, c, k, T=None, theta_variant="h-1", settings=None,
                keep_log=True) -> LevelResult:
    """Fixed uniform mesh, uniform ``tau = c h^k``; gamma vanishes and beta is not accumulated."""
    T = problem.T if T is None else T
    start = time.perf_counter()
    mesh = level_mesh(problem, level)
    h = mesh.mesh_size()[1]
    N, tau = uniform_steps(T, c, k, h)
    space = FeSpace(mesh.snapshot(), p)
    settings = settings or IndicatorSettings(C_P=problem.poincare_constant(), compute_beta=False)
    engine = IndicatorEngine(problem.f, settings)
    U0 = space.interpolate(problem.u0)
    engine.start(U0)
    acc = EstimatorAccumulator(include_beta=False, include_gamma=False)
    errs = ErrorIntegrator(problem)
    acc.initial_error = initial_error(U0, problem)
    tt_sum = gt_sum = 0.0
    state = TimeState(0, 0.0, tau, U0)
    for n in range(1, N + 1):
        t = n * tau
        b = space.load_vector(problem.f, t=t)
        new, U_tr = backward_euler_step(state, space, problem.f, tau, load=b)
        new.t = t
        rec = engine.step(n, t, tau, state.U, U_tr, new.U, load=b)
        acc.accumulate(rec)
        tt_sum += rec.theta_tilde**2 * tau
        gt_sum += rec.gamma_tilde**2 * tau
        errs.step(state.t, state.U, t, new.U)
        state = new
    err_l2 = errs.l2_at(state.U, state.t)
    Theta = acc.Theta if theta_variant == "h-1" else acc.Theta_alt
    if theta_variant not in ("h-1", "energy"):
        raise ValueError(f"unknown theta variant {theta_variant!r}")
    return LevelResult(
        level=level, h=h, tau=tau, steps=N, dim=space.dim, E=acc.E, Theta=Theta, Theta_theta=acc.Theta,
        Theta_alt=acc.Theta_alt, Theta_gamma_tilde=math.sqrt(gt_sum), Theta_theta_tilde=math.sqrt(tt_sum),
        eta=acc.eta, eta_alt=acc.eta_alt, error=errs.total, error_final_l2=err_l2,
        initial_error=acc.initial_error, ei=effectivity_index(acc.eta, errs.total),
        seconds=time.perf_counter() - start, log=acc.history if keep_log else [],
    )


@dataclass
class StudyResult:
    problem: str
    degree: int
    c: float
    k: float
    T: float
    theta_variant: str
    levels: list

    def column(self, name):
        return np.array([getattr(r, name) for r in self.levels], dtype=float)

    def eocs(self, name):
        if len(self.levels) < 2:
            return np.array([])
        return eoc(self.column(name), self.column("h"))

    def table(self):
        eE, eT, eErr = self.eocs("E"), self.eocs("Theta"), self.eocs("error")
        rows = []
        for i, r in enumerate(self.levels):
            rows.append({
                "level": r.level, "h": r.h, "tau": r.tau, "steps": r.steps, "dim": r.dim,
                "E": r.E, "Theta": r.Theta, "error": r.error, "eta": r.eta,
                "EOC_E": eE[i - 1] if i else None, "EOC_Theta": eT[i - 1] if i else None,
                "EOC_error": eErr[i - 1] if i else None, "EI": r.ei,
            })
        return rows


def uniform_study(problem: ProblemSpec, p, levels, c, k, T=None, theta_variant="h-1", progress=None):
    levels = list(levels)
    results = []
    for lev in levels:
        r = uniform_run(problem, p, lev, c, k, T=T, theta_variant=theta_variant)
        results.append(r)
        if progress:
            progress(r)
    return StudyResult(problem.name, p, c, k, problem.T if T is None else T, theta_variant, results)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_step_log(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for rec in history:
            w.writerow([_fmt(float(v)) if isinstance(v, (float, np.floating)) else _fmt(v) for v in rec.csv_row()])


STUDY_COLUMNS = ("level", "h", "tau", "steps", "dim", "E", "Theta", "error", "eta", "EOC_E", "EOC_Theta",
                 "EOC_error", "EI")


def write_study(study: StudyResult, out_dir):
    """``study.csv``, ``study.json`` and one step log per level."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = study.table()
    with open(out / "study.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STUDY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in STUDY_COLUMNS])
    for r in study.levels:
        write_step_log(r.log, out / f"level_{r.level}.csv")
    summary = {
        "problem": study.problem, "degree": study.degree, "tau_coef": study.c, "tau_power": study.k,
        "t_end": study.T, "theta_variant": study.theta_variant,
        "levels": [{k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()} for r in rows],
    }
    with open(out / "study.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return out


def level_summary(r: LevelResult):
    d = asdict(r)
    d.pop("log")
    return d


def _weighted_median(values, weights):
    order = np.argsort(values, kind="stable")
    cw = np.cumsum(weights[order])
    return values[order][np.searchsorted(cw, 0.5 * cw[-1])]


def boundary_density_ratio(leafset, lower=(0.0, 0.0), upper=(1.0, 1.0), width=0.1):
    """Median leaf density ``1/|K|`` near the boundary of a box over the interior median.

    Leaves are classified by centroid distance to the box boundary.  The
    medians are taken over area, i.e. they are medians of the piecewise
    constant density field on each region.
    """
    area = leafset.areas()
    c = leafset.corners().mean(axis=1)
    lo, hi = np.asarray(lower, float), np.asarray(upper, float)
    dist = np.minimum((c - lo).min(axis=1), (hi - c).min(axis=1))
    near = dist < width
    if not near.any() or near.all():
        raise ValueError("both regions must contain leaves")
    dens = 1.0 / area
    return float(_weighted_median(dens[near], area[near]) / _weighted_median(dens[~near], area[~near]))
