"""A posteriori indicators for backward Euler and their time accumulation.

Per step ``n`` (all on the common refinement of the meshes at ``t_{n-1}``
and ``t_n`` where needed):

* ``eps``          C0 ||grad U^n - G U^n||
* ``eps_tilde``    blend of ``eps_n`` and ``eps_{n-1}``
* ``theta``        ||R^n - R^{n-1}||_{-1} / sqrt(3), with the discrete residual
                   R^n = P0 f^n - (U^n - I U^{n-1}) / tau_n  (R^0 = A^0 U^0)
* ``theta_tilde``  C_mu ||U^{n-1} - U^n||_a
* ``gamma``        ||I U^{n-1} - U^{n-1}||_{-1} / tau_n
* ``gamma_tilde``  C_mu' ||h_hat (R^n - R^{n-1})||
* ``beta``         time average of ||P0 f^n - f(t)||_{-1}

The factor 1/sqrt(3) equals the L2 norm of the hat function over one step
divided by sqrt(tau).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .fespace import FeFunction, FeSpace, transfer
from .heat import SOLVER_TOL, common_space, discrete_laplacian, project_load
from .mesh import ancestor_in
from .quadrature import gauss_interval, triangle_rule
from .recovery import elliptic_estimator
from .sparse import cg_solve

SQRT3 = math.sqrt(3.0)


# dual norms -------------------------------------------------------------------------------
def h_minus1_norm(v, space: FeSpace | None = None, rel_tol=SOLVER_TOL, x0=None, return_solution=False):
    """Discrete H^-1 norm ``||Psi||_a`` with ``a(Psi, Phi) = <v, Phi>``.

    ``v`` is an :class:`FeFunction`, a callable ``(x, y)`` or a load vector
    over all DOFs of ``space``. This is the computable part of the dual norm
    and a lower approximation of it.
    """
    if isinstance(v, FeFunction):
        space = v.space if space is None else space
        if v.space is not space:
            raise ValueError("function must live on the given space")
        b = space.mass_full() @ v.coeffs
    elif callable(v):
        b = space.load_vector(v)
    else:
        b = np.asarray(v, dtype=float)
    bf = b[space.free]
    psi, _ = cg_solve(space.stiffness(), bf, rel_tol=rel_tol, x0=x0)
    val = math.sqrt(max(float(psi @ bf), 0.0))
    return (val, psi) if return_solution else val


def poincare_constant(lower=(-1.0, -1.0), upper=(1.0, 1.0)):
    """``diam / pi`` of the bounding box."""
    return math.hypot(upper[0] - lower[0], upper[1] - lower[1]) / math.pi


def poincare_bound(v: FeFunction, C_P):
    return C_P * v.l2_norm()


# single indicators ----------------------------------------------------------------------------
def epsilon_indicator(U: FeFunction, C0=1.0):
    return elliptic_estimator(U, C0=C0)


def epsilon_tilde(eps_n, eps_prev, variant="average"):
    if variant == "average":
        return math.sqrt(0.5 * (eps_n**2 + eps_prev**2))
    if variant == "linear":
        return math.sqrt((eps_n**2 + eps_prev**2 + eps_n * eps_prev) / 3.0)
    raise ValueError(f"unknown eps_tilde variant {variant!r}")


def discrete_residual(p0f: FeFunction, U: FeFunction, U_tr: FeFunction, tau) -> FeFunction:
    """``P0 f^n - (U^n - I U^{n-1}) / tau`` on the new space."""
    return FeFunction(U.space, p0f.coeffs - (U.coeffs - U_tr.coeffs) / tau)


def _dual(g: FeFunction, norm, C_P, x0=None):
    if norm == "h-1":
        return h_minus1_norm(g, x0=x0, return_solution=True)
    if norm == "poincare":
        return poincare_bound(g, C_P), None
    raise ValueError(f"unknown dual norm {norm!r}")


def theta_indicator(R_n: FeFunction, R_prev: FeFunction, common=None, norm="h-1", C_P=1.0, x0=None):
    """Time indicator from two consecutive discrete residuals."""
    C = common or common_space(R_n.space, R_prev.space)
    g = FeFunction(C, transfer(R_n, C).coeffs - transfer(R_prev, C).coeffs)
    val, psi = _dual(g, norm, C_P, x0=x0)
    return val / SQRT3, psi


def theta_tilde(U_prev: FeFunction, U_n: FeFunction, C_mu=1.0, common=None):
    C = common or common_space(U_n.space, U_prev.space)
    d = FeFunction(C, transfer(U_n, C).coeffs - transfer(U_prev, C).coeffs)
    return C_mu * d.energy_norm()


def gamma_indicator(U_prev: FeFunction, U_tr: FeFunction, tau, common=None, norm="h-1", C_P=1.0):
    """Mesh-change indicator; zero when the new mesh only refines the old one."""
    C = common or common_space(U_tr.space, U_prev.space)
    d = FeFunction(C, transfer(U_tr, C).coeffs - transfer(U_prev, C).coeffs)
    if not np.any(d.coeffs):
        return 0.0
    val, _ = _dual(d, norm, C_P)
    return val / tau


def hhat(common: FeSpace, old: FeSpace, new: FeSpace):
    """Per common leaf, the larger of the two containing elements' diameters."""
    parent = common.mesh.parent_array
    out = []
    for S in (old, new):
        rows = S.row_of(ancestor_in(common.elements, S._row >= 0, parent))
        out.append(S.mesh_size()[rows])
    return np.maximum(out[0], out[1])


def gamma_tilde(R_n: FeFunction, R_prev: FeFunction, old: FeSpace, new: FeSpace, C_mu_prime=1.0, common=None):
    C = common or common_space(R_n.space, R_prev.space)
    g = FeFunction(C, transfer(R_n, C).coeffs - transfer(R_prev, C).coeffs)
    h = hhat(C, old, new)
    gK = g.l2_norm_elementwise()
    return C_mu_prime * float(np.sqrt(np.sum((h * gK) ** 2)))


def beta_indicator(f, t_prev, t_n, p0f: FeFunction, C_P=1.0, n_gauss=3, degree=None):
    """``tau^-1 int ||P0 f^n - f(t)||_{-1} dt`` via the Poincare bound."""
    space = p0f.space
    tau = t_n - t_prev
    rule = triangle_rule(2 * space.p + 2 if degree is None else degree)
    X = space.map_points(rule.points)
    Pv = p0f.values_at(rule.points)
    s, w = gauss_interval(n_gauss)
    total = 0.0
    for sk, wk in zip(s, w):
        t = t_prev + sk * tau
        fv = np.broadcast_to(np.asarray(f(X[..., 0], X[..., 1], t), dtype=float), Pv.shape)
        nrm = math.sqrt(float(np.sum(space.areas * ((Pv - fv) ** 2 @ rule.weights))))
        total += wk * nrm
    return C_P * total


# records ----------------------------------------------------------------------------------------
CSV_COLUMNS = (
    "n", "t", "tau", "dof", "eps", "eps_tilde", "theta", "theta_tilde", "gamma", "gamma_tilde",
    "beta", "eta_cum", "eta_alt_cum", "E_cum", "Theta_cum",
)


@dataclass
class StepIndicators:
    n: int
    t: float
    tau: float
    dof: int
    eps: float = 0.0
    eps_prev: float = 0.0
    eps_tilde: float = 0.0
    theta: float = 0.0
    theta_tilde: float = 0.0
    gamma: float = 0.0
    gamma_tilde: float = 0.0
    beta: float = 0.0
    hmax: float = 0.0
    eta_cum: float = 0.0
    eta_alt_cum: float = 0.0
    E_cum: float = 0.0
    Theta_cum: float = 0.0
    Theta_alt_cum: float = 0.0
    coarsen_loss: float = 0.0
    sweeps: int = 0
    redos: int = 0
    converged: bool = True

    def csv_row(self):
        d = asdict(self)
        return [d[c] for c in CSV_COLUMNS]


@dataclass
class EstimatorAccumulator:
    """Running sums of squared indicators times ``tau``."""

    eta2: float = 0.0
    eta_alt2: float = 0.0
    E2: float = 0.0
    Theta2: float = 0.0
    Theta_alt2: float = 0.0
    initial_error: float = 0.0
    include_beta: bool = True
    include_gamma: bool = True
    steps: int = 0
    history: list = field(default_factory=list)

    def accumulate(self, s: StepIndicators):
        beta = s.beta if self.include_beta else 0.0
        gamma = s.gamma if self.include_gamma else 0.0
        self.eta2 += (s.eps_tilde + gamma + beta + s.theta) ** 2 * s.tau
        self.eta_alt2 += (s.eps_tilde + gamma + s.gamma_tilde + beta + s.theta_tilde) ** 2 * s.tau
        self.E2 += 0.5 * (s.eps**2 + s.eps_prev**2) * s.tau
        self.Theta2 += s.theta**2 * s.tau
        self.Theta_alt2 += (s.theta_tilde**2 + s.gamma_tilde**2) * s.tau
        self.steps += 1
        s.eta_cum, s.eta_alt_cum = self.eta, self.eta_alt
        s.E_cum, s.Theta_cum, s.Theta_alt_cum = self.E, self.Theta, self.Theta_alt
        self.history.append(s)
        return self

    @property
    def eta(self):
        return math.sqrt(self.eta2)

    @property
    def eta_alt(self):
        return math.sqrt(self.eta_alt2)

    @property
    def E(self):
        return math.sqrt(self.E2)

    @property
    def Theta(self):
        return math.sqrt(self.Theta2)

    @property
    def Theta_alt(self):
        return math.sqrt(self.Theta_alt2)

    def bound(self, alternative=False):
        """Right-hand side of the reliability bound including the initial error."""
        return self.initial_error / math.sqrt(2.0) + (self.eta_alt if alternative else self.eta)


# per-step driver --------------------------------------------------------------------------------
@dataclass
class IndicatorSettings:
    C0: float = 1.0
    C_mu: float = 1.0
    C_mu_prime: float = 1.0
    C_P: float = 1.0
    eps_variant: str = "average"
    theta_norm: str = "h-1"
    gamma_norm: str = "h-1"
    compute_beta: bool = True
    compute_alternative: bool = True


class IndicatorEngine:
    """Computes :class:`StepIndicators` from consecutive states.

    Keeps the previous residual ``R^{n-1}`` and ``eps_{n-1}`` between calls.
    """

    def __init__(self, f, settings: IndicatorSettings | None = None):
        self.f = f
        self.s = settings or IndicatorSettings()
        self.R_prev = None
        self.eps_prev = None
        self._psi = {}
        self._common_cache = {}

    def checkpoint(self):
        return self.R_prev, self.eps_prev, dict(self._psi)

    def restore(self, cp):
        self.R_prev, self.eps_prev, self._psi = cp[0], cp[1], dict(cp[2])

    def start(self, U0: FeFunction):
        self.eps_prev, _ = epsilon_indicator(U0, self.s.C0)
        self.R_prev = discrete_laplacian(U0)
        return self.eps_prev

    def step(self, n, t, tau, U_prev: FeFunction, U_tr: FeFunction, U_n: FeFunction, load=None, p0f=None,
             eps=None) -> StepIndicators:
        s = self.s
        space = U_n.space
        if p0f is None:
            b = space.load_vector(self.f, t=t) if load is None else load
            p0f = project_load(b, space)
        R_n = discrete_residual(p0f, U_n, U_tr, tau)
        if eps is None:
            eps, _ = epsilon_indicator(U_n, s.C0)
        rec = StepIndicators(n=n, t=t, tau=tau, dof=space.dim, eps=eps, eps_prev=self.eps_prev)
        rec.eps_tilde = epsilon_tilde(eps, self.eps_prev, s.eps_variant)
        if len(self._common_cache) > 8:
            self._common_cache.clear()
        C = common_space(space, self.R_prev.space, cache=self._common_cache)
        key = C.leafset.key
        x0 = self._psi.get(key)
        rec.theta, psi = theta_indicator(R_n, self.R_prev, common=C, norm=s.theta_norm, C_P=s.C_P, x0=x0)
        self._psi = {key: psi} if psi is not None else {}
        old_space = U_prev.space
        if U_prev.space.leafset != space.leafset:
            Cg = common_space(space, old_space, cache=self._common_cache)
            rec.gamma = gamma_indicator(U_prev, U_tr, tau, common=Cg, norm=s.gamma_norm, C_P=s.C_P)
        if s.compute_alternative:
            Ct = common_space(space, old_space, cache=self._common_cache)
            rec.theta_tilde = theta_tilde(U_prev, U_n, s.C_mu, common=Ct)
            rec.gamma_tilde = gamma_tilde(R_n, self.R_prev, self.R_prev.space, space, s.C_mu_prime, common=C)
        if s.compute_beta:
            rec.beta = beta_indicator(self.f, t - tau, t, p0f, C_P=s.C_P)
        rec.hmax = float(space.mesh_size().max())
        self.R_prev = R_n
        self.eps_prev = eps
        return rec


def recompute_eta2(history, include_beta=True, include_gamma=True):
    """Independent recomputation of the accumulated estimator from a step log."""
    total = 0.0
    for s in history:
        b = s.beta if include_beta else 0.0
        g = s.gamma if include_gamma else 0.0
        total += (s.eps_tilde + g + b + s.theta) ** 2 * s.tau
    return total


def step_fields():
    return [f.name for f in fields(StepIndicators)]
