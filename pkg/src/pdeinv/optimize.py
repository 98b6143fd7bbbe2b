"""Outer optimization drivers.

Gauss-Newton inverts the matrix-free GN Hessian with conjugate gradients up
to a relative tolerance, L-BFGS uses the two-loop recursion with a short
history, and both pick step lengths with a weak Wolfe line search.  A dense
Newton iteration on the full stationarity system of the constrained problem
is provided for desk-scale cross checks.  Penalty runs can sweep the penalty
parameter through a warm-started continuation schedule.

Positivity of the model is maintained by the line search: any trial point
with a nonpositive entry evaluates to +inf and is rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .linalg import LinearOperator, pcg, power_iteration_largest
from .objectives import (
    lagrangian_gradient,
    penalty_objective,
    reduced_objective,
    _reg_value,
)
from .solvers import SolveCounter, SystemFactors, solve_adjoint_reduced, solve_state_reduced


@dataclass(frozen=True)
class OptConfig:
    """Settings shared by the outer drivers.

    ``epsilon`` is the stationarity tolerance on the model block of the
    Lagrangian gradient, ``delta`` the relative tolerance of the inner CG
    solve, and ``lambda_schedule`` an ordered list of (scaled lambda, budget)
    continuation stages (empty means a fixed penalty parameter).
    """

    method: str = "gauss_newton"
    epsilon: float = 1e-6
    delta: float = 1e-1
    max_iter: int = 50
    lbfgs_history: int = 5
    c1: float = 1e-4
    c2: float = 0.9
    max_trials: int = 40
    cg_max_iter: int = 200
    lambda_schedule: tuple = ()
    continuation_fraction: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.c1 < self.c2 < 1.0):
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.method not in ("gauss_newton", "lbfgs", "all_at_once"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True)
class IterationRecord:
    """One line of the convergence log."""

    k: int
    lam: float
    fval: float
    norm_Lm: float
    norm_Lu: float
    norm_Lv: float
    data_misfit: float
    pde_misfit: float
    model_err: float
    step: float
    pde_solves: int
    status: str


@dataclass
class RunResult:
    """Final iterate plus the per-iteration records and solve accounting."""

    m: np.ndarray
    records: list
    status: str
    pde_solves: int
    eval_solves: int
    hvp_solves: int
    evaluations: int
    cg_iterations: int


class LineSearchError(RuntimeError):
    pass


def weak_wolfe_linesearch(
    phi: Callable[[float], tuple],
    f0: float,
    slope0: float,
    alpha0: float = 1.0,
    c1: float = 1e-4,
    c2: float = 0.9,
    max_trials: int = 40,
    max_step: Optional[float] = None,
):
    """Bisection-with-expansion search for a weak Wolfe point.

    ``phi(alpha)`` returns ``(f, slope)`` at the trial step; +inf values are
    treated as sufficient-decrease failures, which is how infeasible (e.g.
    nonpositive-model) trials are rejected.  When ``max_step`` caps the
    expansion, a capped step satisfying the decrease condition is accepted
    even if the curvature condition still fails there.

    Returns ``(alpha, trials)``; raises :class:`LineSearchError` on a
    non-descent direction or when no acceptable step is found.
    """
    if slope0 >= 0:
        raise LineSearchError("line search needs a descent direction")
    lo, hi = 0.0, math.inf
    t = alpha0
    if max_step is not None:
        t = min(t, max_step)
    for trial in range(1, max_trials + 1):
        f_t, slope_t = phi(t)
        if not np.isfinite(f_t) or f_t > f0 + c1 * t * slope0:
            hi = t
        elif slope_t < c2 * slope0:
            lo = t
            if max_step is not None and t >= max_step:
                return t, trial
        else:
            return t, trial
        if hi < math.inf:
            t = 0.5 * (lo + hi)
        else:
            t = 2.0 * lo
            if max_step is not None:
                t = min(t, max_step)
        if t <= 0.0 or (hi < math.inf and hi - lo <= 1e-16 * max(1.0, hi)):
            break
    raise LineSearchError(f"no weak Wolfe step within {max_trials} trials")


def _record(k, lam, ev, model_err, step, solves, status) -> IterationRecord:
    d = ev.diagnostics
    return IterationRecord(
        k=k,
        lam=lam,
        fval=ev.value,
        norm_Lm=d["norm_Lm"],
        norm_Lu=d["norm_Lu"],
        norm_Lv=d["norm_Lv"],
        data_misfit=d["data_misfit"],
        pde_misfit=d["pde_misfit"],
        model_err=model_err,
        step=step,
        pde_solves=solves,
        status=status,
    )


def _model_err(m, m_true):
    if m_true is None:
        return float("nan")
    return float(np.linalg.norm(m - m_true))


class _DescentDriver:
    """Shared skeleton of the Gauss-Newton and L-BFGS loops."""

    def __init__(self, evaluate, m0, cfg, counter, m_true, lam, stop_callback, k_offset):
        self.evaluate = evaluate
        self.cfg = cfg
        self.counter = counter if counter is not None else SolveCounter()
        self.m_true = m_true
        self.lam = lam
        self.stop_callback = stop_callback
        self.k_offset = k_offset
        self.m = np.asarray(m0, dtype=np.float64).copy()
        self.records = []
        self.eval_solves = 0
        self.evaluations = 0
        self.cg_iterations = 0
        self.hvp_start = self.counter.count

    def _eval(self, m):
        ev = self.evaluate(m)
        self.eval_solves += ev.pde_solves
        self.evaluations += 1
        return ev

    def direction(self, ev):
        raise NotImplementedError

    def after_step(self, m_old, g_old, m_new, g_new):
        pass

    def initial_step(self, iteration, ev):
        return 1.0

    max_step = None

    def run(self) -> RunResult:
        cfg = self.cfg
        ev = self._eval(self.m)
        k = self.k_offset
        self.records.append(
            _record(k, self.lam, ev, _model_err(self.m, self.m_true),
                    float("nan"), self.counter.count, "ok")
        )
        status = "max_iter"
        for it in range(1, cfg.max_iter + 1):
            if ev.diagnostics["norm_Lm"] <= cfg.epsilon:
                status = "converged"
                break
            if self.stop_callback is not None and self.stop_callback(self.records[-1]):
                status = "continuation"
                break
            p = self.direction(ev)
            slope0 = float(np.dot(ev.gradient, p))
            if slope0 >= 0:
                status = "line_search_failure"
                break
            cache = {}

            def phi(alpha):
                mt = self.m + alpha * p
                if np.min(mt) <= 0.0:
                    return math.inf, math.inf
                ev_t = self._eval(mt)
                cache[alpha] = (mt, ev_t)
                return ev_t.value, float(np.dot(ev_t.gradient, p))

            try:
                alpha, _ = weak_wolfe_linesearch(
                    phi, ev.value, slope0,
                    alpha0=self.initial_step(it, ev),
                    c1=cfg.c1, c2=cfg.c2, max_trials=cfg.max_trials,
                    max_step=self.max_step,
                )
            except LineSearchError:
                status = "line_search_failure"
                break
            m_new, ev_new = cache[alpha]
            self.after_step(self.m, ev.gradient, m_new, ev_new.gradient)
            self.m = m_new
            ev = ev_new
            k += 1
            self.records.append(
                _record(k, self.lam, ev, _model_err(self.m, self.m_true),
                        alpha, self.counter.count, "ok")
            )
        else:
            status = "max_iter"
        last = self.records[-1]
        self.records[-1] = replace(last, status=status)
        total = self.counter.count
        return RunResult(
            m=self.m,
            records=self.records,
            status=status,
            pde_solves=total,
            eval_solves=self.eval_solves,
            hvp_solves=total - self.hvp_start - self.eval_solves,
            evaluations=self.evaluations,
            cg_iterations=self.cg_iterations,
        )


class _GaussNewtonDriver(_DescentDriver):
    max_step = 1.0  # step length in (0, 1]

    def direction(self, ev):
        res = pcg(ev.gn_hvp, ev.gradient, self.cfg.delta, self.cfg.cg_max_iter)
        self.cg_iterations += res.iterations
        return -res.x


class _LbfgsDriver(_DescentDriver):
    max_step = None  # quasi-Newton steps may exceed 1

    def __init__(self, *args):
        super().__init__(*args)
        self.pairs = []

    def direction(self, ev):
        g = ev.gradient
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * float(np.dot(s, q))
            alphas.append(a)
            q = q - a * y
        if self.pairs:
            s, y, _ = self.pairs[-1]
            gamma = float(np.dot(s, y) / np.dot(y, y))
            q = gamma * q
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * float(np.dot(y, q))
            q = q + (a - b) * s
        return -q

    def initial_step(self, iteration, ev):
        if iteration == 1 and not self.pairs:
            return min(1.0, 1.0 / max(np.linalg.norm(ev.gradient), 1e-300))
        return 1.0

    def after_step(self, m_old, g_old, m_new, g_new):
        s = m_new - m_old
        y = g_new - g_old
        sy = float(np.dot(s, y))
        # skip pairs with no usable curvature
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            self.pairs.append((s, y, 1.0 / sy))
            if len(self.pairs) > self.cfg.lbfgs_history:
                self.pairs.pop(0)


def gauss_newton(
    evaluate, m0, cfg: OptConfig, counter=None, m_true=None,
    lam: float = float("inf"), stop_callback=None, k_offset: int = 0,
) -> RunResult:
    """Gauss-Newton with inner CG and a weak Wolfe line search.

    ``evaluate(m)`` must return an :class:`~pdeinv.objectives.ObjectiveEval`
    with gradient and GN Hessian product.  Terminates when ``norm_Lm``
    drops below ``cfg.epsilon`` or the iteration budget is spent.
    """
    return _GaussNewtonDriver(
        evaluate, m0, cfg, counter, m_true, lam, stop_callback, k_offset
    ).run()


def lbfgs(
    evaluate, m0, cfg: OptConfig, counter=None, m_true=None,
    lam: float = float("inf"), stop_callback=None, k_offset: int = 0,
) -> RunResult:
    """Limited-memory BFGS with the two-loop recursion (default history 5)."""
    return _LbfgsDriver(
        evaluate, m0, cfg, counter, m_true, lam, stop_callback, k_offset
    ).run()


def _drive(method, *args, **kwargs) -> RunResult:
    if method == "gauss_newton":
        return gauss_newton(*args, **kwargs)
    if method == "lbfgs":
        return lbfgs(*args, **kwargs)
    raise ValueError(f"unknown descent method {method!r}")


def select_lambda_initial(
    model, m0, experiments, lambda_tilde: float, tol: float = 1e-8, seed: int = 0
) -> float:
    """Absolute penalty parameter from its scale-free value.

    Multiplies ``lambda_tilde`` by the largest eigenvalue of
    ``A^-H P^T P A^-1`` at the initial model (the squared norm of the
    data-to-state map), taking the max over distinct sampling operators.
    """
    if lambda_tilde <= 0:
        raise ValueError("lambda_tilde must be positive")
    factors = SystemFactors(model.system_matrix(model.check_model(m0)))
    n = model.state_dim
    mu_max = 0.0
    seen = set()
    for exp in experiments:
        key = id(exp.sampling)
        if key in seen:
            continue
        seen.add(key)
        P = exp.sampling

        def apply(x, P=P):
            return factors.solve_adjoint(P.T @ (P @ factors.solve(x)))

        mu = power_iteration_largest(LinearOperator((n, n), apply, apply), tol, seed=seed)
        mu_max = max(mu_max, mu)
    if mu_max <= 0.0:
        raise ValueError("sampling operator is degenerate: data term has zero norm")
    return lambda_tilde * mu_max


class LambdaContinuation:
    """Stage controller for a warm-started penalty-parameter sweep.

    A stage ends when its iteration budget is exhausted or when the scaled
    constraint residual ``norm_Lv / lam`` exceeds ``trigger_fraction`` times
    ``norm_Lm``, at which point the next (larger) penalty parameter takes
    over from the current model.
    """

    def __init__(self, schedule: Sequence[tuple], trigger_fraction: float = 0.1):
        schedule = tuple((float(lt), int(budget)) for lt, budget in schedule)
        if not schedule:
            raise ValueError("schedule must not be empty")
        self.schedule = schedule
        self.trigger_fraction = trigger_fraction
        self.stage = 0

    @property
    def current(self) -> tuple:
        return self.schedule[self.stage]

    @property
    def is_last_stage(self) -> bool:
        return self.stage == len(self.schedule) - 1

    def should_advance(self, record: IterationRecord) -> bool:
        if self.is_last_stage:
            return False
        return record.norm_Lv / record.lam > self.trigger_fraction * record.norm_Lm

    def advance(self) -> None:
        if not self.is_last_stage:
            self.stage += 1


def run_inversion(
    model, experiments, m0, cfg: OptConfig, formulation: str,
    reg=None, lambda_tilde: Optional[float] = None, m_true=None, counter=None,
) -> RunResult:
    """Top-level driver dispatching over formulation and method.

    For the penalty formulation, either a fixed ``lambda_tilde`` or the
    continuation schedule from ``cfg.lambda_schedule`` must be given; the
    scale-free values are anchored at the initial model.
    """
    counter = counter if counter is not None else SolveCounter()
    m0 = np.asarray(m0, dtype=np.float64)
    if formulation == "reduced":
        def evaluate(m):
            return reduced_objective(model, m, experiments, reg=reg, counter=counter)

        return _drive(cfg.method, evaluate, m0, cfg, counter, m_true)
    if formulation == "all_at_once":
        factors = SystemFactors(model.system_matrix(model.check_model(m0)))
        u0 = [solve_state_reduced(factors, e.source, counter=counter).u for e in experiments]
        v0 = [
            solve_adjoint_reduced(factors, e.sampling, e.data, u, counter=counter)
            for e, u in zip(experiments, u0)
        ]
        res = all_at_once_newton(model, m0, u0, v0, experiments, cfg, reg=reg,
                                 m_true=m_true, counter=counter)
        return RunResult(res.m, res.records, res.status, counter.count,
                         0, 0, 0, 0)
    if formulation != "penalty":
        raise ValueError(f"unknown formulation {formulation!r}")

    mu_unit = select_lambda_initial(model, m0, experiments, 1.0)
    if cfg.lambda_schedule:
        controller = LambdaContinuation(cfg.lambda_schedule, cfg.continuation_fraction)
        m = m0
        records = []
        totals = dict(eval_solves=0, hvp_solves=0, evaluations=0, cg_iterations=0)
        status = "max_iter"
        while True:
            lt, budget = controller.current
            lam = lt * mu_unit
            stage_cfg = replace(cfg, max_iter=budget, lambda_schedule=())

            def evaluate(m, lam=lam):
                return penalty_objective(model, m, experiments, lam, reg=reg, counter=counter)

            callback = None if controller.is_last_stage else controller.should_advance
            sub = _drive(
                cfg.method, evaluate, m, stage_cfg, counter, m_true,
                lam=lam, stop_callback=callback, k_offset=len(records),
            )
            records.extend(sub.records)
            for key in totals:
                totals[key] += getattr(sub, key)
            m = sub.m
            status = sub.status
            if controller.is_last_stage:
                break
            controller.advance()
        return RunResult(m, records, status, counter.count, **totals)

    if lambda_tilde is None:
        raise ValueError("penalty formulation needs lambda_tilde or a schedule")
    lam = lambda_tilde * mu_unit

    def evaluate(m):
        return penalty_objective(model, m, experiments, lam, reg=reg, counter=counter)

    return _drive(cfg.method, evaluate, m0, cfg, counter, m_true, lam=lam)


@dataclass
class AllAtOnceResult:
    m: np.ndarray
    states: list
    multipliers: list
    records: list
    status: str


def _embed(matrix) -> np.ndarray:
    """Real 2x2-block embedding of a complex matrix: [[Re, -Im], [Im, Re]]."""
    if hasattr(matrix, "toarray"):
        matrix = matrix.toarray()
    re, im = np.real(matrix), np.imag(matrix)
    return np.block([[re, -im], [im, re]])


def _split(z) -> np.ndarray:
    return np.concatenate([np.real(z), np.imag(z)])


def all_at_once_newton(
    model, m0, u0, v0, experiments, cfg: OptConfig, reg=None, m_true=None,
    counter=None, kkt_cap: int = 2000, shift: float = 1e-10,
) -> AllAtOnceResult:
    """Dense Newton iteration on the full stationarity system.

    Updates model, states and multipliers simultaneously from the exact
    second-order system of the constrained problem, assembled in real
    arithmetic by splitting the complex fields into real and imaginary
    parts.  Globalized by backtracking on the norm of the stationarity
    residual; no PDE solves are performed.
    """
    n_exp = len(experiments)
    n = model.state_dim
    dim_m = model.model_dim
    if dim_m + 2 * n_exp * n > kkt_cap:
        raise ValueError(
            f"KKT dimension {dim_m + 2 * n_exp * n} exceeds desk-scale cap {kkt_cap}"
        )
    m = np.asarray(m0, dtype=np.float64).copy()
    states = [np.asarray(u, dtype=np.complex128).copy() for u in u0]
    multipliers = [np.asarray(v, dtype=np.complex128).copy() for v in v0]
    counter = counter if counter is not None else SolveCounter()

    def grad_vector(m, states, multipliers):
        lag = lagrangian_gradient(model, m, states, multipliers, experiments, reg=reg)
        blocks = [lag.wrt_model]
        blocks += [_split(g) for g in lag.wrt_state]
        blocks += [_split(g) for g in lag.wrt_multiplier]
        return np.concatenate(blocks), lag

    def hessian(m, states, multipliers):
        dim = dim_m + 4 * n_exp * n
        H = np.zeros((dim, dim))
        hm = np.zeros((dim_m, dim_m))
        if reg is not None:
            hm += reg.gram.toarray()
        A = model.system_matrix(m)
        embA = _embed(A)
        for k, (exp, u, v) in enumerate(zip(experiments, states, multipliers)):
            hm += np.real(model.curvature_term(m, u, v).toarray())
            G = model.state_jacobian(m, u).toarray()
            K = model.adjoint_state_jacobian(m, v).toarray()
            iu = dim_m + 2 * n * k
            iv = dim_m + 2 * n * (n_exp + k)
            ptp = _embed((exp.sampling.T @ exp.sampling).toarray())
            ku = np.vstack([np.real(K), np.imag(K)])
            gv = np.vstack([np.real(G), np.imag(G)])
            H[iu:iu + 2 * n, :dim_m] = ku
            H[:dim_m, iu:iu + 2 * n] = ku.T
            H[iv:iv + 2 * n, :dim_m] = gv
            H[:dim_m, iv:iv + 2 * n] = gv.T
            H[iu:iu + 2 * n, iu:iu + 2 * n] = ptp
            H[iu:iu + 2 * n, iv:iv + 2 * n] = embA.T
            H[iv:iv + 2 * n, iu:iu + 2 * n] = embA
        H[:dim_m, :dim_m] = hm
        return H

    def unpack(x):
        dm = x[:dim_m]
        du = [
            x[dim_m + 2 * n * k: dim_m + 2 * n * (k + 1)]
            for k in range(n_exp)
        ]
        dv = [
            x[dim_m + 2 * n * (n_exp + k): dim_m + 2 * n * (n_exp + k + 1)]
            for k in range(n_exp)
        ]
        to_c = lambda z: z[:n] + 1j * z[n:]
        return dm, [to_c(z) for z in du], [to_c(z) for z in dv]

    def record_for(k, m, states, lag, step, status):
        data_sq = sum(
            float(np.linalg.norm(e.sampling @ u - e.data) ** 2)
            for e, u in zip(experiments, states)
        )
        pde_sq = sum(float(np.linalg.norm(g) ** 2) for g in lag.wrt_multiplier)
        return IterationRecord(
            k=k, lam=float("nan"),
            fval=0.5 * data_sq + _reg_value(reg, m),
            norm_Lm=lag.norm_model, norm_Lu=lag.norm_state,
            norm_Lv=lag.norm_multiplier,
            data_misfit=float(np.sqrt(data_sq)), pde_misfit=float(np.sqrt(pde_sq)),
            model_err=_model_err(m, m_true), step=step,
            pde_solves=counter.count, status=status,
        )

    g, lag = grad_vector(m, states, multipliers)
    records = [record_for(0, m, states, lag, float("nan"), "ok")]
    status = "max_iter"
    for it in range(1, cfg.max_iter + 1):
        norm_g = np.linalg.norm(g)
        if norm_g <= cfg.epsilon:
            status = "converged"
            break
        H = hessian(m, states, multipliers)
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            delta = None
        if delta is None or not np.all(np.isfinite(delta)):
            tau = shift * max(1.0, float(np.abs(H).max()))
            try:
                delta = np.linalg.solve(H + tau * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError as err:
                raise RuntimeError("singular KKT system after diagonal shift") from err
        dm, du, dv = unpack(delta)
        alpha = 1.0
        accepted = False
        while alpha > 2.0**-40:
            m_t = m + alpha * dm
            if np.min(m_t) > 0.0:
                s_t = [u + alpha * d for u, d in zip(states, du)]
                v_t = [v + alpha * d for v, d in zip(multipliers, dv)]
                g_t, lag_t = grad_vector(m_t, s_t, v_t)
                if np.linalg.norm(g_t) <= (1.0 - 1e-4 * alpha) * norm_g:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            status = "line_search_failure"
            break
        m, states, multipliers = m_t, s_t, v_t
        g, lag = g_t, lag_t
        records.append(record_for(it, m, states, lag, alpha, "ok"))
    records[-1] = replace(records[-1], status=status)
    return AllAtOnceResult(m, states, multipliers, records, status)
