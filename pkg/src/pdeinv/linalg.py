"""Complex sparse linear algebra kernels shared by all solver paths.

Conventions used throughout the package:

* all field quantities (states, sources, data) are complex double precision,
  model parameters are real double precision;
* the adjoint of an operator always means the conjugate transpose.

The direct factorizations wrap SuperLU (via scipy); the iterative solvers
(CGLS, CG, power iteration) are implemented here because the callers rely on
their exact stopping semantics and breakdown reporting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DENSE_EIG_CAP = 512


class FactorizationError(RuntimeError):
    """Direct factorization broke down (singular or indefinite input)."""


class ConvergenceError(RuntimeError):
    """An iterative method stagnated past its iteration cap."""


@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free linear operator with an explicit adjoint.

    Parameters
    ----------
    shape : (rows, cols)
    apply : callable mapping x (cols,) to M x (rows,)
    apply_adjoint : callable mapping y (rows,) to M^H y (cols,)
    """

    shape: tuple[int, int]
    apply: Callable[[np.ndarray], np.ndarray]
    apply_adjoint: Callable[[np.ndarray], np.ndarray]

    @staticmethod
    def from_matrix(matrix) -> "LinearOperator":
        mat = sp.csr_matrix(matrix)
        adj = mat.conj().T.tocsr()
        return LinearOperator(mat.shape, lambda x: mat @ x, lambda y: adj @ y)

    @staticmethod
    def stacked(top: "LinearOperator", bottom: "LinearOperator") -> "LinearOperator":
        """Vertical stack [top; bottom] sharing the same domain."""
        if top.shape[1] != bottom.shape[1]:
            raise ValueError("stacked operators must share the domain dimension")
        rows = top.shape[0] + bottom.shape[0]
        split = top.shape[0]

        def apply(x):
            return np.concatenate([top.apply(x), bottom.apply(x)])

        def apply_adjoint(y):
            return top.apply_adjoint(y[:split]) + bottom.apply_adjoint(y[split:])

        return LinearOperator((rows, top.shape[1]), apply, apply_adjoint)


class HermitianFactorization:
    """Cholesky-type factorization of a Hermitian positive definite matrix.

    Reusable for many right-hand sides.  Construction fails with
    :class:`FactorizationError` if a non-positive pivot is met, which signals
    an indefinite or singular input.
    """

    def __init__(self, matrix):
        mat = sp.csc_matrix(matrix).astype(np.complex128)
        if mat.shape[0] != mat.shape[1]:
            raise ValueError("matrix must be square")
        try:
            self._lu = spla.splu(
                mat,
                diag_pivot_thresh=0.0,
                permc_spec="MMD_AT_PLUS_A",
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as err:
            raise FactorizationError(f"factorization breakdown: {err}") from err
        pivots = self._lu.U.diagonal()
        if not np.all(np.real(pivots) > 0.0):
            raise FactorizationError(
                "non-positive pivot encountered: matrix is not positive definite"
            )
        self.shape = mat.shape

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=np.complex128))


class GeneralFactorization:
    """Sparse LU of a general square invertible matrix.

    ``solve`` solves ``A x = b``; ``solve_adjoint`` solves ``A^H x = b``.
    """

    def __init__(self, matrix):
        mat = sp.csc_matrix(matrix).astype(np.complex128)
        if mat.shape[0] != mat.shape[1]:
            raise ValueError("matrix must be square")
        try:
            self._lu = spla.splu(mat)
        except RuntimeError as err:
            raise FactorizationError(f"factorization breakdown: {err}") from err
        self.shape = mat.shape

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=np.complex128))

    def solve_adjoint(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=np.complex128), trans="H")


def factor_hermitian(matrix) -> HermitianFactorization:
    """Factor a Hermitian positive definite sparse matrix for repeated solves."""
    return HermitianFactorization(matrix)


def factor_general(matrix) -> GeneralFactorization:
    """Factor a general square sparse matrix for repeated (adjoint) solves."""
    return GeneralFactorization(matrix)


@dataclass(frozen=True)
class CglsResult:
    x: np.ndarray
    iterations: int
    converged: bool
    normal_residual: float


def cgls(op: LinearOperator, rhs: np.ndarray, tol: float, maxit: int) -> CglsResult:
    """Conjugate-gradient least squares on ``min ||op x - rhs||_2``.

    Stops when the normal-equation residual satisfies
    ``||op^H (rhs - op x)|| <= tol * ||op^H rhs||`` or at ``maxit``;
    non-convergence is reported through the result, not raised.
    """
    rows, cols = op.shape
    if rows < cols:
        raise ValueError("cgls requires rows >= cols")
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.zeros(cols, dtype=np.complex128)
    r = np.asarray(rhs, dtype=np.complex128).copy()
    s = op.apply_adjoint(r)
    norm_s0 = np.linalg.norm(s)
    if norm_s0 == 0.0:
        return CglsResult(x, 0, True, 0.0)
    p = s.copy()
    gamma = norm_s0**2
    for it in range(1, maxit + 1):
        w = op.apply(p)
        ww = np.linalg.norm(w) ** 2
        if ww == 0.0:
            return CglsResult(x, it, False, np.sqrt(gamma))
        alpha = gamma / ww
        x += alpha * p
        r -= alpha * w
        s = op.apply_adjoint(r)
        gamma_new = np.linalg.norm(s) ** 2
        if np.sqrt(gamma_new) <= tol * norm_s0:
            return CglsResult(x, it, True, np.sqrt(gamma_new))
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return CglsResult(x, maxit, False, np.sqrt(gamma))


@dataclass(frozen=True)
class PcgResult:
    x: np.ndarray
    iterations: int
    converged: bool
    negative_curvature: bool


def pcg(hvp: LinearOperator, g: np.ndarray, delta: float, maxit: int) -> PcgResult:
    """Conjugate gradients on ``H x = g`` for symmetric positive (semi)definite H.

    Terminates with ``||H x - g|| <= delta * ||g||`` or returns the best
    iterate at ``maxit``.  Detected negative curvature stops the iteration
    with the current iterate flagged (the raw g is returned if no step was
    taken yet, so the caller still receives a descent direction).
    """
    g = np.asarray(g, dtype=np.float64)
    x = np.zeros_like(g)
    norm_g = np.linalg.norm(g)
    if norm_g == 0.0:
        return PcgResult(x, 0, True, False)
    r = g.copy()
    p = r.copy()
    rr = norm_g**2
    for it in range(1, maxit + 1):
        hp = hvp.apply(p)
        php = float(np.dot(p, hp))
        if php <= 0.0:
            return PcgResult(x if it > 1 else g.copy(), it - 1, False, True)
        alpha = rr / php
        x += alpha * p
        r -= alpha * hp
        rr_new = float(np.dot(r, r))
        if np.sqrt(rr_new) <= delta * norm_g:
            return PcgResult(x, it, True, False)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return PcgResult(x, maxit, False, False)


def power_iteration_largest(
    op: LinearOperator, tol: float, maxit: int = 10000, seed: int = 0
) -> float:
    """Largest eigenvalue of a Hermitian positive semidefinite operator.

    Uses Rayleigh-quotient power iteration from a seeded random start and
    stops once consecutive estimates agree to relative ``tol``.
    """
    if op.shape[0] != op.shape[1]:
        raise ValueError("operator must be square")
    rng = np.random.default_rng(seed)
    n = op.shape[1]
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x /= np.linalg.norm(x)
    mu_prev = None
    for _ in range(maxit):
        y = op.apply(x)
        mu = float(np.real(np.vdot(x, y)))
        norm_y = np.linalg.norm(y)
        if norm_y == 0.0:
            return 0.0
        x = y / norm_y
        if mu_prev is not None and abs(mu - mu_prev) <= tol * max(abs(mu), 1e-300):
            return mu
        mu_prev = mu
    raise ConvergenceError(f"power iteration stagnated after {maxit} iterations")


def dense_hermitian_eigenvalues(matrix, cap: int = DENSE_EIG_CAP) -> np.ndarray:
    """All eigenvalues of a Hermitian matrix, sorted in descending order.

    Rejects inputs larger than the desk-scale ``cap``.
    """
    if sp.issparse(matrix):
        matrix = matrix.toarray()
    mat = np.asarray(matrix)
    if mat.shape[0] != mat.shape[1]:
        raise ValueError("matrix must be square")
    if mat.shape[0] > cap:
        raise ValueError(f"dimension {mat.shape[0]} exceeds dense cap {cap}")
    return np.linalg.eigvalsh(mat)[::-1].copy()
