"""Objective functionals, gradients and Gauss-Newton Hessian products.

Three interchangeable formulations of the same inverse problem:

* reduced: eliminate the state exactly through a PDE solve and measure the
  data misfit only (2K solves per objective+gradient evaluation over K
  experiments, 2K per Hessian product);
* penalty: reconstruct the state from physics and data jointly through the
  augmented least-squares solve, then measure both misfits (K solves per
  evaluation, K per Hessian product) -- the state has been projected out of
  the joint objective, so the gradient needs no extra adjoint solve;
* equation-error: treat the state as known and fit the PDE residual, which
  is linear least squares in the model for the 1D physics (no solves).

Gradients with respect to the (real) model are the real part of the complex
adjoint products.  All Hessian products are matrix-free and bump the shared
solve counter exactly per the per-iteration cost accounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .linalg import LinearOperator
from .solvers import (
    AugmentedFactors,
    SystemFactors,
    _count,
    solve_adjoint_penalty,
    solve_adjoint_reduced,
    solve_state_penalty,
    solve_state_reduced,
)


def _sampling_matrix(P) -> sp.csr_matrix:
    return sp.csr_matrix(P.matrix if hasattr(P, "matrix") else P)


@dataclass(frozen=True)
class Experiment:
    """One acquisition: a source, a receiver sampling operator and its data."""

    source: np.ndarray
    sampling: sp.csr_matrix
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "source", np.asarray(self.source, dtype=np.complex128))
        object.__setattr__(self, "sampling", _sampling_matrix(self.sampling))
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.complex128))
        if self.sampling.shape[1] != self.source.shape[0]:
            raise ValueError("sampling operator and source dimensions disagree")
        if self.sampling.shape[0] != self.data.shape[0]:
            raise ValueError("sampling operator and data dimensions disagree")


class ExperimentSet(Sequence):
    """K independent experiments sharing one state space."""

    def __init__(self, experiments):
        exps = tuple(experiments)
        if not exps:
            raise ValueError("at least one experiment is required")
        n = exps[0].source.shape[0]
        if any(e.source.shape[0] != n for e in exps):
            raise ValueError("experiments must share the state dimension")
        self.experiments = exps

    def __len__(self):
        return len(self.experiments)

    def __getitem__(self, i):
        return self.experiments[i]

    def data_norm(self) -> float:
        return float(np.sqrt(sum(np.linalg.norm(e.data) ** 2 for e in self.experiments)))


@dataclass(frozen=True)
class Regularizer:
    """Smoothing term (alpha/2) ||D m||^2 on the model space."""

    alpha: float
    operator: sp.spmatrix
    gram: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        op = sp.csr_matrix(self.operator)
        object.__setattr__(self, "operator", op)
        object.__setattr__(self, "gram", (self.alpha * (op.T @ op)).tocsr())

    @classmethod
    def smoothing(cls, model, alpha: float) -> "Regularizer":
        return cls(alpha, model.regularizer_matrix())

    def value(self, m: np.ndarray) -> float:
        return 0.5 * self.alpha * float(np.linalg.norm(self.operator @ m) ** 2)

    def gradient(self, m: np.ndarray) -> np.ndarray:
        return self.gram @ m


def _reg_value(reg, m):
    return 0.0 if reg is None else reg.value(m)


def _reg_gradient(reg, m):
    return 0.0 if reg is None else reg.gradient(m)


def _reg_hvp(reg, x):
    return 0.0 if reg is None else reg.gram @ x


@dataclass
class ObjectiveEval:
    """Objective value with gradient, Hessian-product handle and diagnostics.

    ``diagnostics`` carries ``norm_Lm``, ``norm_Lu``, ``norm_Lv`` (the three
    blocks of the Lagrangian gradient at the states used internally),
    ``data_misfit`` and ``pde_misfit``; ``pde_solves`` is the number of PDE
    solves consumed by this evaluation.
    """

    value: float
    gradient: Optional[np.ndarray]
    gn_hvp: Optional[LinearOperator]
    diagnostics: dict
    pde_solves: int


@dataclass(frozen=True)
class LagrangianGradient:
    """Three-block stationarity residual of the constrained problem."""

    wrt_model: np.ndarray
    wrt_state: tuple
    wrt_multiplier: tuple

    @property
    def norm_model(self) -> float:
        return float(np.linalg.norm(self.wrt_model))

    @property
    def norm_state(self) -> float:
        return float(np.sqrt(sum(np.linalg.norm(g) ** 2 for g in self.wrt_state)))

    @property
    def norm_multiplier(self) -> float:
        return float(np.sqrt(sum(np.linalg.norm(g) ** 2 for g in self.wrt_multiplier)))

    @property
    def total_norm(self) -> float:
        return float(
            np.sqrt(self.norm_model**2 + self.norm_state**2 + self.norm_multiplier**2)
        )


def lagrangian_gradient(
    model, m, states, multipliers, experiments, reg=None
) -> LagrangianGradient:
    """All three blocks of the Lagrangian gradient at an arbitrary triple.

    The model block is Re(G^H v) summed over experiments plus the gradient of
    the active regularizer; the state block is A^H v + P^T (P u - d); the
    multiplier block is A u - q.
    """
    m = model.check_model(m)
    A = model.system_matrix(m)
    A_adj = A.conj().T.tocsr()
    wrt_model = np.zeros(model.model_dim) + _reg_gradient(reg, m)
    wrt_state = []
    wrt_multiplier = []
    for exp, u, v in zip(experiments, states, multipliers):
        G = model.state_jacobian(m, u)
        wrt_model += np.real(G.conj().T @ v)
        wrt_state.append(A_adj @ v + exp.sampling.T @ (exp.sampling @ u - exp.data))
        wrt_multiplier.append(A @ u - exp.source)
    return LagrangianGradient(wrt_model, tuple(wrt_state), tuple(wrt_multiplier))


def _misfit_diagnostics(grad, lag: LagrangianGradient, data_sq, pde_sq) -> dict:
    return {
        "norm_Lm": float(np.linalg.norm(grad)) if grad is not None else float("nan"),
        "norm_Lu": lag.norm_state if lag is not None else float("nan"),
        "norm_Lv": lag.norm_multiplier if lag is not None else float("nan"),
        "data_misfit": float(np.sqrt(data_sq)),
        "pde_misfit": float(np.sqrt(pde_sq)),
    }


def reduced_objective(
    model, m, experiments, reg=None, counter=None, value_only: bool = False
) -> ObjectiveEval:
    """Data misfit of the exactly-constrained states, with adjoint gradient.

    Costs K solves for the value alone and 2K with the gradient; every
    Gauss-Newton Hessian product costs another 2K.
    """
    m = model.check_model(m)
    A = model.system_matrix(m)
    factors = SystemFactors(A)
    solves = 0
    value = _reg_value(reg, m)
    data_sq = 0.0
    pde_sq = 0.0
    states = []
    for exp in experiments:
        sol = solve_state_reduced(factors, exp.source, exp.sampling, exp.data, counter)
        solves += sol.solve_count_delta
        states.append(sol.u)
        value += 0.5 * sol.residual_data**2
        data_sq += sol.residual_data**2
        pde_sq += sol.residual_pde**2
    if value_only:
        diag = _misfit_diagnostics(None, None, data_sq, pde_sq)
        return ObjectiveEval(value, None, None, diag, solves)

    grad = np.zeros(model.model_dim) + _reg_gradient(reg, m)
    multipliers = []
    jacobians = []
    for exp, u in zip(experiments, states):
        v = solve_adjoint_reduced(factors, exp.sampling, exp.data, u, counter)
        solves += 1
        G = model.state_jacobian(m, u)
        grad += np.real(G.conj().T @ v)
        multipliers.append(v)
        jacobians.append(G)

    def hvp(x):
        out = np.zeros(model.model_dim) + _reg_hvp(reg, x)
        for exp, G in zip(experiments, jacobians):
            z = factors.solve(G @ x)
            y = factors.solve_adjoint(exp.sampling.T @ (exp.sampling @ z))
            _count(counter, 2)
            out += np.real(G.conj().T @ y)
        return out

    lag = lagrangian_gradient(model, m, states, multipliers, experiments, reg=None)
    diag = _misfit_diagnostics(grad, lag, data_sq, pde_sq)
    operator = LinearOperator((model.model_dim, model.model_dim), hvp, hvp)
    return ObjectiveEval(value, grad, operator, diag, solves)


def _augmented_by_sampling(A, experiments, lam):
    """One augmented factorization per distinct sampling operator."""
    table = {}
    for exp in experiments:
        key = id(exp.sampling)
        if key not in table:
            table[key] = AugmentedFactors(A, exp.sampling, lam)
    return table


def penalty_objective(
    model, m, experiments, lam: float, reg=None, counter=None, value_only: bool = False
) -> ObjectiveEval:
    """Joint data-plus-physics misfit with the state projected out.

    The state solve blends the PDE and the data; the multiplier is the scaled
    PDE residual, so objective and gradient together cost K solves.  Each
    Gauss-Newton Hessian product costs K augmented solves.
    """
    if lam <= 0:
        raise ValueError("penalty parameter must be positive")
    m = model.check_model(m)
    A = model.system_matrix(m)
    aug = _augmented_by_sampling(A, experiments, lam)
    solves = 0
    value = _reg_value(reg, m)
    data_sq = 0.0
    pde_sq = 0.0
    states = []
    for exp in experiments:
        sol = solve_state_penalty(
            A, exp.sampling, exp.source, exp.data, lam,
            counter=counter, factors=aug[id(exp.sampling)],
        )
        solves += sol.solve_count_delta
        states.append(sol.u)
        value += 0.5 * sol.residual_data**2 + 0.5 * lam * sol.residual_pde**2
        data_sq += sol.residual_data**2
        pde_sq += sol.residual_pde**2
    if value_only:
        diag = _misfit_diagnostics(None, None, data_sq, pde_sq)
        return ObjectiveEval(value, None, None, diag, solves)

    grad = np.zeros(model.model_dim) + _reg_gradient(reg, m)
    multipliers = []
    jacobians = []
    for exp, u in zip(experiments, states):
        v = solve_adjoint_penalty(A, u, exp.source, lam)
        G = model.state_jacobian(m, u)
        grad += np.real(G.conj().T @ v)
        multipliers.append(v)
        jacobians.append(G)

    A_adj = A.conj().T.tocsr()

    def hvp(x):
        out = np.zeros(model.model_dim) + _reg_hvp(reg, x)
        for exp, G in zip(experiments, jacobians):
            t = G @ x
            z = aug[id(exp.sampling)].solve(A_adj @ t)
            _count(counter, 1)
            out += lam * np.real(G.conj().T @ (t - A @ z))
        return out

    lag = lagrangian_gradient(model, m, states, multipliers, experiments, reg=None)
    diag = _misfit_diagnostics(grad, lag, data_sq, pde_sq)
    operator = LinearOperator((model.model_dim, model.model_dim), hvp, hvp)
    return ObjectiveEval(value, grad, operator, diag, solves)


def penalty_full_hessian_operator(
    model, m, experiments, lam: float, reg=None, counter=None
) -> LinearOperator:
    """Exact Hessian of the projected penalty objective, matrix-free.

    Includes the second-order coupling terms on top of the Gauss-Newton part:
    the product is assembled as the Schur complement of the joint
    model-state Hessian, eliminating the state block through the augmented
    normal matrix.
    """
    if lam <= 0:
        raise ValueError("penalty parameter must be positive")
    m = model.check_model(m)
    A = model.system_matrix(m)
    A_adj = A.conj().T.tocsr()
    aug = _augmented_by_sampling(A, experiments, lam)
    pieces = []
    for exp in experiments:
        sol = solve_state_penalty(
            A, exp.sampling, exp.source, exp.data, lam,
            counter=counter, factors=aug[id(exp.sampling)],
        )
        u = sol.u
        r = A @ u - exp.source
        G = model.state_jacobian(m, u)
        K = model.adjoint_state_jacobian(m, r)
        R = model.curvature_term(m, u, r)
        coupling = (K + A_adj @ G).tocsr()
        pieces.append((exp, G, R, coupling))

    def hvp(x):
        out = np.zeros(model.model_dim) + _reg_hvp(reg, x)
        for exp, G, R, W in pieces:
            out += lam * np.real(G.conj().T @ (G @ x))
            out += lam * np.real(R @ x)
            z = aug[id(exp.sampling)].solve(W @ x)
            _count(counter, 1)
            out -= lam * np.real(W.conj().T @ z)
        return out

    return LinearOperator((model.model_dim, model.model_dim), hvp, hvp)


def sparse_gn_hessian_penalty(
    model, m, experiments, lam: float, reg=None, counter=None, states=None
) -> sp.csr_matrix:
    """Sparse surrogate ``lam * sum_k Re(G_k^H G_k)`` of the penalty GN Hessian.

    Dominates the exact Gauss-Newton operator (the omitted projector term is
    positive semidefinite), shares its sparsity with the structural product
    of the model Jacobians, and assembles explicitly.
    """
    if lam <= 0:
        raise ValueError("penalty parameter must be positive")
    m = model.check_model(m)
    A = model.system_matrix(m)
    if states is None:
        aug = _augmented_by_sampling(A, experiments, lam)
        states = [
            solve_state_penalty(
                A, exp.sampling, exp.source, exp.data, lam,
                counter=counter, factors=aug[id(exp.sampling)],
            ).u
            for exp in experiments
        ]
    out = sp.csr_matrix((model.model_dim, model.model_dim))
    for exp, u in zip(experiments, states):
        G = model.state_jacobian(m, u)
        out = out + lam * (G.conj().T @ G).real
    if reg is not None:
        out = out + reg.gram
    return out.tocsr()


def equation_error_objective(
    model, m, experiments, states, reg=None
) -> ObjectiveEval:
    """PDE-residual misfit with the states held fixed (no PDE solves).

    For physics whose applied system is linear in the model this is a linear
    least-squares problem in m; the GN Hessian is the exact Hessian then.
    """
    m = model.check_model(m)
    A = model.system_matrix(m)
    value = _reg_value(reg, m)
    grad = np.zeros(model.model_dim) + _reg_gradient(reg, m)
    gn = sp.csr_matrix((model.model_dim, model.model_dim))
    data_sq = 0.0
    pde_sq = 0.0
    for exp, u in zip(experiments, states):
        u = np.asarray(u, dtype=np.complex128)
        r = A @ u - exp.source
        value += 0.5 * float(np.linalg.norm(r) ** 2)
        pde_sq += float(np.linalg.norm(r) ** 2)
        data_sq += float(np.linalg.norm(exp.sampling @ u - exp.data) ** 2)
        G = model.state_jacobian(m, u)
        grad += np.real(G.conj().T @ r)
        gn = gn + (G.conj().T @ G).real
    if reg is not None:
        gn = gn + reg.gram
    gn = gn.tocsr()
    diag = {
        "norm_Lm": float(np.linalg.norm(grad)),
        "norm_Lu": float("nan"),
        "norm_Lv": float(np.sqrt(pde_sq)),
        "data_misfit": float(np.sqrt(data_sq)),
        "pde_misfit": float(np.sqrt(pde_sq)),
    }
    operator = LinearOperator(
        (model.model_dim, model.model_dim), lambda x: gn @ x, lambda x: gn @ x
    )
    return ObjectiveEval(value, grad, operator, diag, 0)
