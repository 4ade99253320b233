"""Sparse symmetric matrices and preconditioned conjugate gradients.

Storage and the mat-vec kernel come from ``scipy.sparse`` (CSR); the solver
is the textbook PCG loop with a Jacobi preconditioner.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """CG did not converge or broke down."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class SparseSym:
    """Symmetric matrix in compressed-row storage."""

    def __init__(self, A, check=False):
        A = sp.csr_matrix(A, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        A.sort_indices()
        if check:
            if not np.all(np.isfinite(A.data)):
                raise ValueError("non-finite matrix entries")
            if abs(A - A.T).max() > 1e-12 * max(abs(A).max(), 1.0):
                raise ValueError("matrix is not symmetric")
        self.csr = A
        self._diag = None

    @classmethod
    def from_dense(cls, a):
        return cls(sp.csr_matrix(np.asarray(a, dtype=float)), check=True)

    @property
    def n(self):
        return self.csr.shape[0]

    @property
    def indptr(self):
        return self.csr.indptr

    @property
    def indices(self):
        return self.csr.indices

    @property
    def values(self):
        return self.csr.data

    def diagonal(self):
        if self._diag is None:
            self._diag = self.csr.diagonal()
        return self._diag

    def matvec(self, x):
        return self.csr @ x

    __matmul__ = matvec

    def todense(self):
        return self.csr.toarray()


@dataclass
class CGReport:
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    residual_history: list = field(default_factory=list)


def cg_solve(A: SparseSym, b, rel_tol=1e-10, max_iter=None, precond="diagonal", x0=None, history=False):
    """Solve ``A x = b`` for SPD ``A``.

    Stops when ``||b - A x||_2 <= rel_tol * ||b||_2``. Raises
    :class:`SolverError` when ``max_iter`` (default ``10 n``) is exceeded or
    the iteration breaks down.
    """
    b = np.asarray(b, dtype=float)
    n = A.n
    if b.shape != (n,):
        raise ValueError(f"rhs has shape {b.shape}, expected ({n},)")
    max_iter = 10 * max(n, 1) if max_iter is None else max_iter
    report = CGReport()
    bnorm = np.linalg.norm(b)
    if n == 0 or bnorm == 0.0:
        return np.zeros(n), report
    if precond == "diagonal":
        d = A.diagonal()
        if np.any(d <= 0):
            raise SolverError("non-positive diagonal; matrix is not SPD")
        dinv = 1.0 / d
    elif precond in (None, "none"):
        dinv = None
    else:
        raise ValueError(f"unknown preconditioner {precond!r}")

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A.matvec(x) if x0 is not None else b.copy()
    target = rel_tol * bnorm
    rnorm = np.linalg.norm(r)
    if history:
        report.residual_history.append(rnorm)
    if rnorm <= target:
        report.residual = rnorm
        return x, report
    z = r * dinv if dinv is not None else r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A.matvec(p)
        pAp = p @ Ap
        if not np.isfinite(pAp) or pAp <= 0.0:
            report.iterations, report.residual, report.converged = it, rnorm, False
            raise SolverError(f"CG breakdown at iteration {it} (p'Ap = {pAp})", report)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = np.linalg.norm(r)
        if history:
            report.residual_history.append(rnorm)
        if rnorm <= target:
            report.iterations, report.residual = it, rnorm
            return x, report
        z = r * dinv if dinv is not None else r
        rz_new = r @ z
        p *= rz_new / rz
        p += z
        rz = rz_new
    report.iterations, report.residual, report.converged = max_iter, rnorm, False
    raise SolverError(
        f"CG did not converge in {max_iter} iterations (residual {rnorm:.3e}, target {target:.3e})", report
    )
