"""Backward Euler for the heat equation, discrete Laplacian and L2 projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fespace import FeFunction, FeSpace, cross_load, transfer
from .mesh import common_refinement
from .sparse import cg_solve

SOLVER_TOL = 1e-10


@dataclass
class TimeState:
    n: int
    t: float
    tau: float
    U: FeFunction

    @property
    def space(self) -> FeSpace:
        return self.U.space


def _solve(A, rhs, x0=None, tol=SOLVER_TOL):
    x, _ = cg_solve(A, rhs, rel_tol=tol, x0=x0)
    return x


def backward_euler_step(prev: TimeState, space: FeSpace, f, tau, rel_tol=SOLVER_TOL, load=None):
    """One step of ``(U - I U_prev)/tau + A U = P0 f(t)``.

    ``f`` takes ``(x, y, t)``; ``load`` may supply the assembled load vector
    of ``f`` at the new time over all DOFs. Returns the new state and the
    transferred predecessor ``I U_prev``.
    """
    if tau <= 0:
        raise ValueError("timestep must be positive")
    t = prev.t + tau
    U_tr = transfer(prev.U, space)
    b = space.load_vector(f, t=t) if load is None else load
    free = space.free
    rhs = space.mass().matvec(U_tr.free_coeffs) + tau * b[free]
    x0 = U_tr.free_coeffs
    u = _solve(space.system(tau), rhs, x0=x0, tol=rel_tol)
    return TimeState(prev.n + 1, t, tau, space.from_free(u)), U_tr


def discrete_laplacian(V: FeFunction, rel_tol=SOLVER_TOL) -> FeFunction:
    """``A V`` with ``<A V, Phi> = a(V, Phi)`` for all ``Phi`` in the H^1_0 space."""
    space = V.space
    rhs = (space.stiffness_full() @ V.coeffs)[space.free]
    return space.from_free(_solve(space.mass(), rhs, tol=rel_tol))


def l2_project(v, space: FeSpace, t=None, degree=None, rel_tol=SOLVER_TOL) -> FeFunction:
    """L2 projection onto the H^1_0 space.

    ``v`` is a callable ``(x, y)`` (or ``(x, y, t)`` when ``t`` is given) or an
    :class:`FeFunction` on any space of the same tree.
    """
    if isinstance(v, FeFunction):
        b = cross_load(v, space)
    else:
        b = space.load_vector(v, degree=degree, t=t)
    return project_load(b, space, rel_tol=rel_tol)


def project_load(b, space: FeSpace, rel_tol=SOLVER_TOL) -> FeFunction:
    """Solve ``M p = b`` on the free DOFs (``b`` over all DOFs)."""
    return space.from_free(_solve(space.mass(), b[space.free], tol=rel_tol))


def hat_weights(t, t0, t1):
    """Values of the two hat functions ``(l_{n-1}(t), l_n(t))`` on ``[t0, t1]``."""
    if t < t0 - 1e-14 * max(1.0, abs(t0)) or t > t1 + 1e-14 * max(1.0, abs(t1)):
        raise ValueError(f"t={t} outside [{t0}, {t1}]")
    s = (t - t0) / (t1 - t0)
    return 1.0 - s, s


def common_space(A: FeSpace, B: FeSpace, cache=None) -> FeSpace:
    """Space over the common refinement of two spaces' leaf sets."""
    if A.leafset == B.leafset:
        return A
    ls = common_refinement(A.leafset, B.leafset)
    if ls == A.leafset:
        return A
    if ls == B.leafset:
        return B
    if cache is not None:
        key = (ls.key, A.p)
        if key not in cache:
            cache[key] = FeSpace(ls, A.p)
        return cache[key]
    return FeSpace(ls, A.p)


def time_extension_eval(states, t) -> FeFunction:
    """Piecewise-linear-in-time extension ``U(t)`` on the common refinement
    of the two bracketing states.
    """
    times = [s.t for s in states]
    if t < times[0] or t > times[-1]:
        raise ValueError(f"t={t} outside [{times[0]}, {times[-1]}]")
    n = int(np.searchsorted(times, t, side="left"))
    if times[n] == t:
        return states[n].U
    a, b = states[n - 1], states[n]
    l0, l1 = hat_weights(t, a.t, b.t)
    C = common_space(a.space, b.space)
    Ua = transfer(a.U, C, zero_boundary=False)
    Ub = transfer(b.U, C, zero_boundary=False)
    return FeFunction(C, l0 * Ua.coeffs + l1 * Ub.coeffs)
