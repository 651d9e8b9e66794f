"""Linear solvers for the weighted lattice operator on the torus."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .calculus import operator_matrix
from .errors import ConfigurationError, ContractError, ConvergenceError

__all__ = ["SolveReport", "solve_weighted", "solve_poisson_spectral", "WeightedOperator"]

RESTART = 500


@dataclass
class SolveReport:
    iterations: int
    residual: float
    tol: float
    wall_time: float
    converged: bool = True

    def to_dict(self) -> dict:
        return dict(iterations=self.iterations, residual=self.residual, tol=self.tol,
                    wall_time=self.wall_time, converged=self.converged)


class WeightedOperator:
    """Assembled operator ``-div*(A grad .) (+ 1/T)`` with its Jacobi diagonal.

    Building the sparse matrix once and reusing it for several right-hand
    sides (all corrector directions, auxiliary fields) saves the assembly cost.
    """

    def __init__(self, a: np.ndarray, T: float | None = None):
        if T is not None and not T > 0:
            raise ConfigurationError("massive parameter T must be positive")
        self.a = a
        self.T = T
        self.shape = a.shape[1:]
        self.matrix: sp.csr_matrix = operator_matrix(a, T)
        self.diag = self.matrix.diagonal()
        d = a.shape[0]
        L = a.shape[1]
        ratio = float(a.max() / a.min())
        self.max_iter = int(np.ceil(50 * L ** (d / 2) * ratio))

    def solve(self, rhs: np.ndarray, tol: float = 1e-8, max_iter: int | None = None):
        return _pcg(self, np.asarray(rhs, dtype=float), tol, max_iter or self.max_iter)


def _pcg(op: WeightedOperator, rhs: np.ndarray, tol: float, max_iter: int):
    if not 0 < tol < 1:
        raise ConfigurationError(f"tolerance must lie in (0, 1), got {tol}")
    t0 = time.perf_counter()
    massless = op.T is None
    b = rhs.ravel().copy()
    n = b.size
    if massless:
        if abs(b.sum()) > 1e-12 * np.abs(b).sum() + 1e-300:
            raise ContractError(
                f"right-hand side has nonzero total {b.sum():.3e}; the massless problem on the torus "
                "needs a mean-zero source")
        b -= b.mean()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(op.shape), SolveReport(0, 0.0, tol, time.perf_counter() - t0)

    A = op.matrix
    minv = 1.0 / op.diag
    x = np.zeros(n)
    it = 0
    while True:
        # (re)start from the true residual
        r = b - A @ x
        if massless:
            r -= r.mean()
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            break
        if it >= max_iter:
            report = SolveReport(it, res, tol, time.perf_counter() - t0, converged=False)
            raise ConvergenceError(f"PCG did not reach tol={tol} in {max_iter} iterations (residual {res:.3e})",
                                   report)
        z = minv * r
        if massless:
            z -= z.mean()
        p = z.copy()
        rz = r @ z
        for _ in range(min(RESTART, max_iter - it)):
            Ap = A @ p
            alpha = rz / (p @ Ap)
            x += alpha * p
            r -= alpha * Ap
            it += 1
            if np.linalg.norm(r) <= 0.5 * tol * bnorm:
                break
            z = minv * r
            if massless:
                z -= z.mean()
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        if massless:
            x -= x.mean()

    return x.reshape(op.shape), SolveReport(it, float(res), tol, time.perf_counter() - t0)


def solve_weighted(a, rhs: np.ndarray, tol: float = 1e-8, T: float | None = None,
                   operator: WeightedOperator | None = None):
    """Solve ``-div*(A grad u) (+ u/T) = rhs`` by Jacobi-preconditioned CG.

    Parameters
    ----------
    a : ndarray or Environment
        Conductances of shape ``(d, L, ..., L)``.
    rhs : ndarray
        Source as a vertex field.  Without a massive term it must sum to zero.
    tol : float
        Target relative residual ``||Op u - rhs|| / ||rhs||``, recomputed from
        scratch at the end.
    T : float, optional
        Massive parameter; adds ``u/T`` to the operator.
    operator : WeightedOperator, optional
        Pre-assembled operator for ``a`` and ``T`` to reuse.

    Returns
    -------
    u : ndarray
        Solution; mean zero in the massless case.
    report : SolveReport
    """
    if operator is None:
        a = getattr(a, "a", a)
        operator = WeightedOperator(a, T)
    return operator.solve(rhs, tol)


def lattice_symbol(shape: tuple[int, ...]) -> np.ndarray:
    """``sum_i 2 - 2 cos(2 pi k_i / L)`` on the rfftn frequency grid."""
    d = len(shape)
    L = shape[0]
    lam = np.zeros(shape[:-1] + (L // 2 + 1,))
    for i in range(d):
        k = np.arange(L // 2 + 1) if i == d - 1 else np.arange(L)
        s = 2.0 - 2.0 * np.cos(2 * np.pi * k / L)
        bshape = [1] * d
        bshape[i] = len(k)
        lam = lam + s.reshape(bshape)
    return lam


def solve_poisson_spectral(rhs: np.ndarray, check: bool = True) -> np.ndarray:
    """Mean-zero solution of ``-laplacian u = rhs`` by FFT diagonalisation."""
    rhs = np.asarray(rhs, dtype=float)
    if check and abs(rhs.sum()) > 1e-10 * max(np.abs(rhs).sum(), 1e-300):
        raise ContractError(f"right-hand side has nonzero total {rhs.sum():.3e}")
    lam = lattice_symbol(rhs.shape)
    rh = np.fft.rfftn(rhs)
    lam.flat[0] = 1.0
    rh /= lam
    rh.flat[0] = 0.0
    return np.fft.irfftn(rh, s=rhs.shape, axes=tuple(range(rhs.ndim)))
