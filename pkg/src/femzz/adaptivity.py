"""Space-adaptive backward Euler with coarsening and timestep control."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .benchmarks import ErrorIntegrator, ProblemSpec, effectivity_index, initial_error
from .coarsen_predict import coarsening_preindicator
from .fespace import FeFunction, FeSpace
from .heat import TimeState, backward_euler_step
from .indicators import EstimatorAccumulator, IndicatorEngine, IndicatorSettings, epsilon_indicator
from .mesh import LeafSet, Mesh
from .quadrature import triangle_rule

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
TIMESTEP_MODES = ("explicit", "implicit", "uniform")


class TimestepUnderflow(RuntimeError):
    """The timestep fell below ``tau_min``; ``result`` holds the partial run."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


@dataclass
class AdaptConfig:
    tol_eps: float
    tol_gamma: float
    tol_theta: float
    tol_theta_min: float
    xi: float = 0.7
    k_max: int = 5
    tau0: float = 0.01
    T: float = 1.0
    timestep: str = "explicit"
    degree: int = 1
    C0: float = 1.0
    C_mu: float = 1.0
    C_mu_prime: float = 1.0
    C_P: float | None = None
    tau_min: float | None = None
    redo_limit: int = 20
    initial_refinements: int = 2
    initial_sweeps: int = 10
    max_leaves: int | None = None
    eps_variant: str = "average"
    theta_norm: str = "h-1"
    snapshot_times: tuple = ()
    track_error: bool = True

    def __post_init__(self):
        for name in ("tol_eps", "tol_gamma", "tol_theta", "tol_theta_min"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if not (self.tol_theta_min < self.tol_theta or math.isinf(self.tol_theta)):
            raise ValueError("need tol_theta_min < tol_theta")
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError("xi must lie in [0, 1]")
        if self.k_max < 0:
            raise ValueError("k_max must be non-negative")
        if not (self.tau0 > 0 and self.T > 0):
            raise ValueError("tau0 and T must be positive")
        if self.timestep not in TIMESTEP_MODES:
            raise ValueError(f"timestep must be one of {TIMESTEP_MODES}")
        if self.tau_min is None:
            self.tau_min = 1e-8 * self.T
        self.snapshot_times = tuple(sorted(float(t) for t in self.snapshot_times))

    @property
    def global_tol(self):
        """``tol`` with ``tol^2 = T (tol_theta^2 + tol_eps^2 + tol_gamma^2)``."""
        return math.sqrt(self.T * (self.tol_theta**2 + self.tol_eps**2 + self.tol_gamma**2))


# marking and coarsening -----------------------------------------------------------------------
def max_strategy(eps_K, xi):
    """Indices with ``eps_K^2 >= xi * max eps_L^2`` (and ``eps_K > 0``)."""
    e = np.abs(np.asarray(eps_K, dtype=float))
    if e.size == 0 or e.max() <= 0:
        return np.array([], dtype=np.int64)
    r = e / e.max()
    return np.flatnonzero((r * r >= xi) & (e > 0))


def select_coarsening(preindicator: dict, budget):
    """Greedy smallest-first selection with total predicted loss <= ``budget``."""
    chosen, total = [], 0.0
    for patch, g in sorted(preindicator.items(), key=lambda kv: (kv[1], kv[0].vertex)):
        if total + g > budget:
            break
        chosen.append(patch)
        total += g
    return chosen, total


@dataclass
class SpaceAdaptResult:
    state: TimeState
    U_tr: FeFunction
    load: np.ndarray
    eps: float
    eps_K: np.ndarray
    sweeps: int
    converged: bool
    coarsen_loss: float
    coarsened: int


def space_adapt(prev: TimeState, mesh: Mesh, f, tau, config: AdaptConfig, spaces=None) -> SpaceAdaptResult:
    """Coarsen once, then solve and refine by the maximum strategy.

    The mesh is mutated in place; ``prev.U`` must live on its current leaves.
    """
    p = prev.space.p
    loss, n_coarse = 0.0, 0
    budget = config.tol_gamma**2
    if budget > 0:
        pre = coarsening_preindicator(prev.U)
        floor = config.initial_refinements
        pre = {q: g for q, g in pre.items() if min(mesh.generation[P] for P in q.parents) >= floor}
        chosen, loss = select_coarsening(pre, budget)
        if chosen:
            rep = mesh.coarsen(chosen)
            n_coarse = len(rep.coarsened)
            if rep.skipped:
                loss -= sum(pre[q] for q in rep.skipped)
    k = 0
    while True:
        space = _space_for(mesh, p, spaces)
        t = prev.t + tau
        b = space.load_vector(f, t=t)
        state, U_tr = backward_euler_step(prev, space, f, tau, load=b)
        eps, eps_K = epsilon_indicator(state.U, config.C0)
        if eps <= config.tol_eps or k >= config.k_max:
            break
        marked = max_strategy(eps_K, config.xi)
        if config.max_leaves is not None and mesh.n_leaves + 2 * len(marked) > config.max_leaves:
            log.warning("leaf cap %d reached at t=%.6g", config.max_leaves, t)
            break
        mesh.refine(space.elements[marked])
        k += 1
    return SpaceAdaptResult(state, U_tr, b, eps, eps_K, k, eps <= config.tol_eps, loss, n_coarse)


def _space_for(mesh, p, spaces):
    ls = mesh.snapshot()
    if spaces is None:
        return FeSpace(ls, p)
    key = ls.key
    if key not in spaces:
        if len(spaces) > 6:
            spaces.clear()
        spaces[key] = FeSpace(ls, p)
    return spaces[key]


def initial_space_adapt(mesh: Mesh, u0, p, config: AdaptConfig):
    """Interpolate ``u0`` and refine where ``||u0 - I u0||_{L2(K)}`` is large."""
    rule = triangle_rule(2 * p + 2)
    for sweep in range(config.initial_sweeps + 1):
        space = FeSpace(mesh.snapshot(), p)
        U0 = space.interpolate(u0)
        X = space.map_points(rule.points)
        d = U0.values_at(rule.points) - np.asarray(u0(X[..., 0], X[..., 1]), dtype=float)
        eK = np.sqrt(space.areas * (d**2 @ rule.weights))
        if np.sqrt(np.sum(eK**2)) <= config.tol_eps or sweep == config.initial_sweeps:
            break
        marked = max_strategy(eK, config.xi)
        if config.max_leaves is not None and mesh.n_leaves + 2 * len(marked) > config.max_leaves:
            break
        mesh.refine(space.elements[marked])
    return U0


# time loop ---------------------------------------------------------------------------------
@dataclass
class Snapshot:
    t: float
    leafset: LeafSet
    U: FeFunction


@dataclass
class AdaptResult:
    problem: str
    config: AdaptConfig
    history: list
    accumulator: EstimatorAccumulator
    final: TimeState
    total_dof: int
    redos: int
    error: float | None = None
    error_final_l2: float | None = None
    snapshots: list = field(default_factory=list)
    taus: list = field(default_factory=list)
    aborted: bool = False

    @property
    def steps(self):
        return len(self.history)

    @property
    def eta(self):
        return self.accumulator.eta

    @property
    def ei(self):
        if self.error is None:
            return None
        return effectivity_index(self.eta, self.error)


def _next_exponent(m, theta, config):
    if theta > config.tol_theta:
        return m - 1
    if theta <= config.tol_theta_min:
        return m + 1
    return m


def run_adaptive(problem: ProblemSpec, config: AdaptConfig, mesh: Mesh | None = None, progress=None) -> AdaptResult:
    """Adaptive run from ``t = 0`` to ``config.T``.

    Timesteps are ``tau0 * 2^(m/2)`` for integer ``m``; the last step is
    clipped to end exactly at ``T``.
    """
    p = config.degree
    T = config.T
    mesh = problem.macro_mesh() if mesh is None else mesh
    mesh.refine_uniform(config.initial_refinements)
    if config.timestep == "uniform":
        U0 = FeSpace(mesh.snapshot(), p).interpolate(problem.u0)
    else:
        U0 = initial_space_adapt(mesh, problem.u0, p, config)
    settings = IndicatorSettings(
        C0=config.C0, C_mu=config.C_mu, C_mu_prime=config.C_mu_prime,
        C_P=problem.poincare_constant() if config.C_P is None else config.C_P,
        eps_variant=config.eps_variant, theta_norm=config.theta_norm,
        compute_beta=not problem.f_is_zero,
    )
    engine = IndicatorEngine(problem.f, settings)
    engine.start(U0)
    acc = EstimatorAccumulator()
    errs = ErrorIntegrator(problem) if (config.track_error and problem.has_exact) else None
    if problem.has_exact:
        acc.initial_error = initial_error(U0, problem)
    state = TimeState(0, 0.0, config.tau0, U0)
    result = AdaptResult(problem.name, config, acc.history, acc, state, 0, 0)
    pending_snaps = list(config.snapshot_times)
    spaces = {}
    m = 0
    fixed_space = U0.space if config.timestep == "uniform" else None
    while T - state.t > 1e-12 * T:
        redos = 0
        before = mesh.snapshot()
        cp = engine.checkpoint()
        while True:
            tau = config.tau0 * 2.0 ** (m / 2.0)
            if tau < config.tau_min:
                result.aborted = True
                result.final = state
                raise TimestepUnderflow(f"timestep {tau:.3e} below tau_min {config.tau_min:.3e} at t={state.t:.6g}",
                                        result)
            tau_n = min(tau, T - state.t)
            if T - (state.t + tau_n) < 1e-10 * T:
                tau_n = T - state.t
            if fixed_space is not None:
                b = fixed_space.load_vector(problem.f, t=state.t + tau_n)
                new, U_tr = backward_euler_step(state, fixed_space, problem.f, tau_n, load=b)
                sa = SpaceAdaptResult(new, U_tr, b, *epsilon_indicator(new.U, config.C0), 0, True, 0.0, 0)
            else:
                sa = space_adapt(state, mesh, problem.f, tau_n, config, spaces)
            new = sa.state
            if state.t + tau_n >= T - 1e-12 * T:
                new.t = T
            rec = engine.step(new.n, new.t, tau_n, state.U, sa.U_tr, new.U, load=sa.load, eps=sa.eps)
            if config.timestep == "implicit" and rec.theta > config.tol_theta:
                if redos < config.redo_limit:
                    redos += 1
                    m -= 1
                    mesh.set_leaves(before)
                    engine.restore(cp)
                    continue
                log.warning("redo limit reached at t=%.6g; accepting theta=%.3e", new.t, rec.theta)
            break
        rec.sweeps, rec.redos, rec.converged = sa.sweeps, redos, sa.converged
        rec.coarsen_loss = sa.coarsen_loss
        acc.accumulate(rec)
        result.redos += redos
        result.total_dof += new.space.dim
        result.taus.append(tau_n)
        if errs is not None:
            errs.step(state.t, state.U, new.t, new.U)
        while pending_snaps and new.t >= pending_snaps[0] - 1e-12:
            result.snapshots.append(Snapshot(new.t, new.space.leafset, new.U))
            pending_snaps.pop(0)
        if progress:
            progress(rec)
        state = new
        if config.timestep != "uniform":
            m = _next_exponent(m, rec.theta, config)
    result.final = state
    if errs is not None:
        result.error = errs.total
        result.error_final_l2 = errs.l2_at(state.U, state.t)
    return result


def explicit_timestep_adapt(problem: ProblemSpec, config: AdaptConfig, **kw) -> AdaptResult:
    if config.timestep != "explicit":
        raise ValueError("config.timestep must be 'explicit'")
    return run_adaptive(problem, config, **kw)


def implicit_timestep_control(problem: ProblemSpec, config: AdaptConfig, **kw) -> AdaptResult:
    if config.timestep != "implicit":
        raise ValueError("config.timestep must be 'implicit'")
    return run_adaptive(problem, config, **kw)
