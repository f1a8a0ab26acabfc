"""Dense small-scale constrained optimisation.

Problems are posed as::

    min_z  f(z; p)   s.t.  G(z; p) = 0,  H(z; p) <= 0

with Lagrangian ``f + lam^T G + mu^T H``. Convex QPs are solved with a
Mehrotra primal-dual interior-point method followed by an active-set polish
that recovers exact complementarity; bilinear NLPs with a line-search SQP
whose subproblems go through the same QP solver. Parametric sensitivities
``dz*/dp`` come from the implicit function theorem applied to the
active-set-reduced KKT system.
"""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import dgecon

logger = logging.getLogger(__name__)

CONVERGED, MAX_ITER, INFEASIBLE, LINE_SEARCH_FAILED = (
    "converged",
    "max-iter",
    "infeasible",
    "line-search-failed",
)


class SolverError(RuntimeError):
    pass


class SensitivityError(SolverError):
    pass


class DegenerateSolutionError(SensitivityError):
    """Some inequality is weakly active (zero multiplier and zero slack)."""


class SingularKKTError(SensitivityError):
    def __init__(self, message, condition=np.inf):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class SolverOptions:
    kkt_tol: float = 1e-8
    qp_max_iter: int = 100
    sqp_max_iter: int = 50
    hessian_floor: float = 1e-9
    active_tol: float = 1e-9
    strict_tol: float = 1e-6
    dependency_tol: float = 1e-9
    min_step: float = 1e-12
    armijo: float = 1e-4
    penalty_growth: float = 10.0
    max_condition: float = 1e14
    trace_path: Optional[str] = None


DEFAULT_OPTIONS = SolverOptions()


@dataclass
class QpData:
    """``min 1/2 z^T H z + g^T z  s.t.  A_eq z = b_eq,  A_in z <= b_in``."""

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray

    def __post_init__(self):
        n = self.g.size
        self.H = np.asarray(self.H, dtype=float).reshape(n, n)
        self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n)
        self.A_in = np.asarray(self.A_in, dtype=float).reshape(-1, n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        self.b_in = np.asarray(self.b_in, dtype=float).ravel()
        if self.A_eq.shape[0] != self.b_eq.size or self.A_in.shape[0] != self.b_in.size:
            raise ValueError("constraint matrix and right-hand side sizes differ")

    def cost(self, z):
        return 0.5 * z @ self.H @ z + self.g @ z


@dataclass
class NlpProblem:
    """Derivative oracles of a parametric NLP at a fixed parameter ``p``.

    ``param_jacobian(z, lam, mu)`` returns the partial derivatives with
    respect to ``p`` of the Lagrangian gradient, of ``G`` and of ``H``.
    Convex QPs may also carry their matrices in ``qp`` so solvers skip the
    oracle round trip.
    """

    n: int
    n_eq: int
    n_ineq: int
    cost: Callable
    cost_grad: Callable
    eq: Callable
    eq_jac: Callable
    ineq: Callable
    ineq_jac: Callable
    lagrangian_hessian: Callable
    param_jacobian: Optional[Callable] = None
    p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kind: str = "convex-qp"
    qp: Optional[QpData] = None

    def __post_init__(self):
        if self.kind not in ("convex-qp", "bilinear-nlp"):
            raise ValueError(f"unknown problem kind {self.kind!r}")

    @property
    def n_params(self) -> int:
        return np.asarray(self.p).size

    def qp_data(self) -> QpData:
        if self.qp is not None:
            return self.qp
        z0 = np.zeros(self.n)
        lam0, mu0 = np.zeros(self.n_eq), np.zeros(self.n_ineq)
        return QpData(
            self.lagrangian_hessian(z0, lam0, mu0),
            self.cost_grad(z0),
            self.eq_jac(z0),
            -self.eq(z0),
            self.ineq_jac(z0),
            -self.ineq(z0),
        )


def qp_problem(
    H, g, A_eq=None, b_eq=None, A_in=None, b_in=None, p=None, param_jacobian=None,
    kind="convex-qp",
) -> NlpProblem:
    g = np.asarray(g, dtype=float).ravel()
    n = g.size
    A_eq = np.zeros((0, n)) if A_eq is None else A_eq
    b_eq = np.zeros(0) if b_eq is None else b_eq
    A_in = np.zeros((0, n)) if A_in is None else A_in
    b_in = np.zeros(0) if b_in is None else b_in
    d = QpData(np.asarray(H, dtype=float), g, A_eq, b_eq, A_in, b_in)
    return NlpProblem(
        n=n,
        n_eq=d.b_eq.size,
        n_ineq=d.b_in.size,
        cost=d.cost,
        cost_grad=lambda z: d.H @ z + d.g,
        eq=lambda z: d.A_eq @ z - d.b_eq,
        eq_jac=lambda z: d.A_eq,
        ineq=lambda z: d.A_in @ z - d.b_in,
        ineq_jac=lambda z: d.A_in,
        lagrangian_hessian=lambda z, lam, mu: d.H,
        param_jacobian=param_jacobian,
        p=np.zeros(0) if p is None else np.asarray(p, dtype=float),
        kind=kind,
        qp=d,
    )


@dataclass
class PrimalDualSolution:
    z: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    status: str
    kkt_residual: float
    active: np.ndarray
    iterations: int = 0
    cost: float = np.nan

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


@dataclass
class SensitivityResult:
    """``dz*/dp`` with rows ordered as (primal, equality multipliers, inequality multipliers)."""

    jacobian: np.ndarray
    n: int
    n_eq: int
    condition: float
    active: np.ndarray
    strict: np.ndarray

    @property
    def primal(self) -> np.ndarray:
        return self.jacobian[: self.n]

    @property
    def eq_multipliers(self) -> np.ndarray:
        return self.jacobian[self.n : self.n + self.n_eq]

    @property
    def ineq_multipliers(self) -> np.ndarray:
        return self.jacobian[self.n + self.n_eq :]


def _inf_norm(*arrays) -> float:
    return max((float(np.max(np.abs(a))) for a in arrays if a.size), default=0.0)


def kkt_residual(nlp: NlpProblem, z, lam=None, mu=None) -> float:
    """Infinity norm of stationarity, feasibility, sign and complementarity residuals.

    ``z`` may also be a :class:`PrimalDualSolution`.
    """
    if isinstance(z, PrimalDualSolution):
        z, lam, mu = z.z, z.lam, z.mu
    z = np.asarray(z, dtype=float)
    lam = np.zeros(nlp.n_eq) if lam is None else np.asarray(lam, dtype=float)
    mu = np.zeros(nlp.n_ineq) if mu is None else np.asarray(mu, dtype=float)
    grad = np.array(nlp.cost_grad(z), dtype=float)
    parts = []
    if nlp.n_eq:
        grad += nlp.eq_jac(z).T @ lam
        parts.append(nlp.eq(z))
    if nlp.n_ineq:
        h = nlp.ineq(z)
        grad += nlp.ineq_jac(z).T @ mu
        parts += [mu * h, np.maximum(h, 0.0), np.maximum(-mu, 0.0)]
    return _inf_norm(grad, *parts)


def _qp_residual(d: QpData, x, y, z) -> float:
    rd = d.H @ x + d.g + d.A_eq.T @ y + d.A_in.T @ z
    h = d.A_in @ x - d.b_in
    return _inf_norm(rd, d.A_eq @ x - d.b_eq, z * h, np.maximum(h, 0.0), np.maximum(-z, 0.0))


def _independent_rows(A_eq, A_act, order, tol):
    """Greedy subset of ``A_act`` rows (visited in ``order``) independent of ``A_eq`` and each other."""
    n = A_act.shape[1]
    if A_eq.shape[0]:
        Q, R = np.linalg.qr(A_eq.T)
        keep_eq = np.abs(np.diag(R)) > tol * max(1.0, np.abs(R).max())
        basis = Q[:, keep_eq]
    else:
        basis = np.zeros((n, 0))
    full = np.vstack([A_eq, A_act])
    if full.shape[0] <= n:
        _, R = np.linalg.qr(full.T)
        diag = np.abs(np.diag(R))
        if diag.size == 0 or diag.min() > tol * max(1.0, diag.max()):
            return np.sort(np.asarray(order, dtype=int))
    keep = []
    for i in order:
        v = A_act[i].copy()
        scale = max(np.linalg.norm(v), 1.0)
        for _ in range(2):
            v -= basis @ (basis.T @ v)
        nv = np.linalg.norm(v)
        if nv > tol * scale:
            keep.append(i)
            basis = np.column_stack([basis, v / nv])
    return np.sort(np.asarray(keep, dtype=int))


def _solve_eqp(d: QpData, active, order=None, tol=1e-9):
    """Equality-constrained QP with the ``active`` inequalities held as equalities.

    Returns ``(x, y, z_full, kept)`` or ``None`` when the KKT matrix is singular.
    """
    n, me, mi = d.g.size, d.b_eq.size, d.b_in.size
    active = np.asarray(active, dtype=int)
    if active.size:
        order = active if order is None else order
        pos = {a: i for i, a in enumerate(active)}
        local = _independent_rows(d.A_eq, d.A_in[active], [pos[a] for a in order], tol)
        kept = active[local]
    else:
        kept = active
    AA = d.A_in[kept]
    ma = kept.size
    K = np.zeros((n + me + ma, n + me + ma))
    K[:n, :n] = d.H
    K[:n, n : n + me] = d.A_eq.T
    K[n : n + me, :n] = d.A_eq
    K[:n, n + me :] = AA.T
    K[n + me :, :n] = AA
    rhs = np.concatenate([-d.g, d.b_eq, d.b_in[kept]])
    try:
        with np.errstate(all="ignore"):
            sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    x, y = sol[:n], sol[n : n + me]
    z = np.zeros(mi)
    z[kept] = sol[n + me :]
    return x, y, z, kept


def _polish(d: QpData, active, order, opts: SolverOptions):
    out = _solve_eqp(d, active, order, opts.dependency_tol)
    if out is None:
        return None
    x, y, z, kept = out
    tol = opts.kkt_tol
    if d.b_in.size:
        h = d.A_in @ x - d.b_in
        if np.any(h > tol) or np.any(z < -tol):
            return None
        z = np.maximum(z, 0.0)
    return x, y, z


def _step_to_boundary(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    with np.errstate(over="ignore"):  # tiny negative dv gives inf, which min() discards
        return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _interior_point(d: QpData, opts: SolverOptions, x0=None):
    n, me, mi = d.g.size, d.b_eq.size, d.b_in.size
    H, g, Ae, be, Ai, bi = d.H, d.g, d.A_eq, d.b_eq, d.A_in, d.b_in
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    y = np.zeros(me)
    s = np.maximum(bi - Ai @ x, 1.0)
    z = np.ones(mi)
    Hr = H + opts.hessian_floor * np.eye(n)
    K = np.zeros((n + me, n + me))
    K[:n, n:] = Ae.T
    K[n:, :n] = Ae
    tol = 0.1 * opts.kkt_tol
    it = 0
    for it in range(1, opts.qp_max_iter + 1):
        rd = H @ x + g + Ae.T @ y + Ai.T @ z
        rp = Ae @ x - be
        ri = Ai @ x + s - bi
        gap = s @ z / mi if mi else 0.0
        if _inf_norm(rd, rp, ri, s * z) <= tol:
            break
        D = z / s
        K[:n, :n] = Hr + (Ai.T * D) @ Ai
        try:
            with np.errstate(all="ignore"):
                lu = sla.lu_factor(K, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            break

        def newton(rc):
            # s -> 0 on infeasible problems; the non-finite step ends the loop below
            with np.errstate(all="ignore"):
                t = (z * ri - rc) / s
                sol = sla.lu_solve(lu, np.concatenate([-rd - Ai.T @ t, -rp]), check_finite=False)
            dx, dy = sol[:n], sol[n:]
            Adx = Ai @ dx
            return dx, dy, t + D * Adx, -ri - Adx

        dx, dy, dz, ds = newton(s * z)
        if mi:
            a_aff = min(_step_to_boundary(s, ds), _step_to_boundary(z, dz))
            gap_aff = (s + a_aff * ds) @ (z + a_aff * dz) / mi
            sigma = (gap_aff / gap) ** 3 if gap > 0 else 0.0
            dx, dy, dz, ds = newton(s * z + ds * dz - sigma * gap)
            a_s = _step_to_boundary(s, ds)
            a_z = _step_to_boundary(z, dz)
            alpha = min(1.0, 0.995 * a_s if a_s < 1.0 else 1.0, 0.995 * a_z if a_z < 1.0 else 1.0)
        else:
            alpha = 1.0
        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        z = z + alpha * dz
        if not np.all(np.isfinite(x)):
            break
    return x, y, z, s, it


def solve_qp(
    qp: NlpProblem | QpData,
    warm_start: PrimalDualSolution | None = None,
    opts: SolverOptions = DEFAULT_OPTIONS,
) -> PrimalDualSolution:
    """Solve a convex QP to KKT residual ``opts.kkt_tol``.

    A warm start contributes its active set: when that set is already
    optimal the interior-point iterations are skipped entirely.
    """
    d = qp.qp_data() if isinstance(qp, NlpProblem) else qp
    mi = d.b_in.size

    def finish(x, y, z, status, it):
        h = d.A_in @ x - d.b_in
        active = np.flatnonzero((h > -opts.active_tol) & (z > 0)) if mi else np.zeros(0, int)
        res = _qp_residual(d, x, y, z)
        if status == CONVERGED and res > opts.kkt_tol:
            status = MAX_ITER
        return PrimalDualSolution(x, y, z, status, res, active, it, float(d.cost(x)))

    if mi == 0:
        out = _solve_eqp(d, np.zeros(0, int))
        if out is None:
            raise SolverError("singular equality-constrained QP")
        x, y, z, _ = out
        res = _qp_residual(d, x, y, z)
        if d.b_eq.size and _inf_norm(d.A_eq @ x - d.b_eq) > 1e-6:
            return PrimalDualSolution(x, y, z, INFEASIBLE, res, np.zeros(0, int), 0, float(d.cost(x)))
        return finish(x, y, z, CONVERGED, 0)

    if warm_start is not None and warm_start.active is not None:
        guess = np.asarray(warm_start.active, dtype=int)
        guess = guess[guess < mi]
        mu_prev = np.asarray(warm_start.mu)
        order = guess[np.argsort(-mu_prev[guess], kind="stable")] if mu_prev.size == mi else guess
        out = _polish(d, guess, order, opts)
        if out is not None:
            sol = finish(*out, CONVERGED, 0)
            if sol.converged:
                return sol

    def attempt(scale):
        data = d if scale == 1.0 else QpData(d.H / scale, d.g / scale, d.A_eq, d.b_eq, d.A_in, d.b_in)
        x, y, z, s, it = _interior_point(data, opts)
        y, z = scale * y, scale * z
        if not np.all(np.isfinite(x)):
            return PrimalDualSolution(x, y, z, INFEASIBLE, np.inf, np.zeros(0, int), it)
        primal_err = _inf_norm(d.A_eq @ x - d.b_eq, np.maximum(d.A_in @ x - d.b_in, 0.0))
        active = np.flatnonzero(z > scale * s)
        order = active[np.argsort(-z[active], kind="stable")]
        out = _polish(d, active, order, opts)
        if out is not None:
            sol = finish(*out, CONVERGED, it)
            if sol.converged:
                return sol
        sol = finish(x, y, np.maximum(z, 0.0), CONVERGED, it)
        if not sol.converged and primal_err > 1e-6:
            sol.status = INFEASIBLE
        return sol

    sol = attempt(1.0)
    # large penalty weights can stall the iteration; retry on a unit-scale objective
    scale = max(float(np.abs(d.H).max(initial=0.0)), float(np.abs(d.g).max(initial=0.0)))
    if not sol.converged and scale > 1.0:
        retry = attempt(scale)
        if retry.converged:
            return retry
    return sol


def brute_force_qp(qp: NlpProblem | QpData, max_ineq: int = 12) -> PrimalDualSolution:
    """Enumerate every active set and keep the best KKT point (test oracle)."""
    d = qp.qp_data() if isinstance(qp, NlpProblem) else qp
    mi = d.b_in.size
    if mi > max_ineq:
        raise ValueError(f"brute force limited to {max_ineq} inequalities, got {mi}")
    best = None
    for r in range(mi + 1):
        for subset in itertools.combinations(range(mi), r):
            out = _solve_eqp(d, np.array(subset, dtype=int))
            if out is None:
                continue
            x, y, z, kept = out
            if kept.size != len(subset):
                continue
            h = d.A_in @ x - d.b_in
            if np.any(h > 1e-9) or np.any(z < -1e-9):
                continue
            if _inf_norm(d.A_eq @ x - d.b_eq) > 1e-9:
                continue
            c = float(d.cost(x))
            if best is None or c < best[0] - 1e-12:
                best = (c, x, y, np.maximum(z, 0.0), np.array(subset, dtype=int))
    if best is None:
        n = d.g.size
        return PrimalDualSolution(np.zeros(n), np.zeros(d.b_eq.size), np.zeros(mi), INFEASIBLE,
                                  np.inf, np.zeros(0, int))
    c, x, y, z, active = best
    return PrimalDualSolution(x, y, z, CONVERGED, _qp_residual(d, x, y, z), active, 0, c)


def _regularize_reduced(W, J, floor):
    """Levenberg shift making ``W`` positive definite on the null space of ``J``."""
    n = W.shape[0]
    if J.shape[0]:
        Q, _ = np.linalg.qr(J.T, mode="complete")
        Z = Q[:, J.shape[0] :]
    else:
        Z = np.eye(n)
    if Z.shape[1] == 0:
        return W, 0.0
    lam_min = np.linalg.eigvalsh(Z.T @ W @ Z)[0]
    shift = 0.0 if lam_min >= floor else (floor - lam_min) + 1e-8 * max(1.0, abs(lam_min))
    if shift:
        W = W + shift * np.eye(n)
    return W, shift


def solve_sqp(
    nlp: NlpProblem,
    init,
    opts: SolverOptions = DEFAULT_OPTIONS,
    lam0=None,
    mu0=None,
    warm_active=None,
) -> PrimalDualSolution:
    """Line-search SQP with exact Lagrangian Hessian and an l1 merit function."""
    z = np.array(init, dtype=float)
    lam = np.zeros(nlp.n_eq) if lam0 is None else np.array(lam0, dtype=float)
    mu = np.zeros(nlp.n_ineq) if mu0 is None else np.array(mu0, dtype=float)
    penalty = 1.0
    trace = [] if opts.trace_path else None
    qp_warm = None
    if warm_active is not None:
        qp_warm = PrimalDualSolution(z, lam, mu, CONVERGED, 0.0, np.asarray(warm_active, int))

    def violation(zz):
        v = np.abs(nlp.eq(zz)).sum() if nlp.n_eq else 0.0
        if nlp.n_ineq:
            v += np.maximum(nlp.ineq(zz), 0.0).sum()
        return v

    status, it, res = MAX_ITER, 0, np.inf
    for it in range(opts.sqp_max_iter + 1):
        res = kkt_residual(nlp, z, lam, mu)
        if trace is not None:
            trace.append((it, nlp.cost(z) + penalty * violation(z), res, np.nan))
        if res <= opts.kkt_tol:
            status = CONVERGED
            break
        if it == opts.sqp_max_iter:
            break
        grad = nlp.cost_grad(z)
        Jg = nlp.eq_jac(z)
        W = nlp.lagrangian_hessian(z, lam, mu)
        W, _ = _regularize_reduced(W, Jg, opts.hessian_floor)
        d = QpData(W, grad, Jg, -nlp.eq(z), nlp.ineq_jac(z), -nlp.ineq(z))
        sub = solve_qp(d, qp_warm, opts)
        if sub.status == INFEASIBLE:
            status = INFEASIBLE
            break
        qp_warm = sub
        step = sub.z
        needed = _inf_norm(sub.lam, sub.mu)
        if penalty < 1.1 * needed:
            penalty = max(1.1 * needed, penalty)
        f0, v0 = nlp.cost(z), violation(z)
        merit0 = f0 + penalty * v0
        slope = grad @ step - penalty * v0
        alpha, accepted = 1.0, False
        for _retry in range(2):
            alpha = 1.0
            while alpha >= opts.min_step:
                zt = z + alpha * step
                merit = nlp.cost(zt) + penalty * violation(zt)
                if merit <= merit0 + opts.armijo * alpha * min(slope, 0.0):
                    accepted = True
                    break
                if alpha == 1.0:
                    # full steps that already shrink the KKT residual are kept (Maratos guard)
                    lt = lam + (sub.lam - lam)
                    mt = sub.mu
                    if kkt_residual(nlp, zt, lt, mt) <= 0.1 * res and violation(zt) <= max(v0, 1e-10):
                        accepted = True
                        break
                alpha *= 0.5
            if accepted:
                break
            penalty *= opts.penalty_growth
            merit0 = f0 + penalty * v0
            slope = grad @ step - penalty * v0
        if trace is not None:
            trace[-1] = trace[-1][:3] + (alpha if accepted else 0.0,)
        if not accepted:
            status = LINE_SEARCH_FAILED
            break
        z = z + alpha * step
        lam = lam + alpha * (sub.lam - lam)
        mu = mu + alpha * (sub.mu - mu)
    if trace is not None:
        with open(opts.trace_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if fh.tell() == 0:
                w.writerow(["iteration", "merit", "kkt_residual", "step"])
            w.writerows(trace)
    active = np.zeros(0, int)
    if nlp.n_ineq:
        h = nlp.ineq(z)
        active = np.flatnonzero((h > -opts.active_tol) & (mu > 0))
    return PrimalDualSolution(z, lam, mu, status, res, active, it, float(nlp.cost(z)))


def sensitivity(
    nlp: NlpProblem,
    sol: PrimalDualSolution,
    opts: SolverOptions = DEFAULT_OPTIONS,
    flip_param_sign: bool = False,
) -> SensitivityResult:
    """``dz*/dp = -(dK/dz)^{-1} dK/dp`` on the active-set-reduced KKT system.

    Inactive inequalities are dropped, active ones kept as equalities. Active
    rows linearly dependent on the others (e.g. a redundant upper bound at a
    simplex corner) are excused from the strictness test and dropped.
    ``flip_param_sign`` exists only to let the verification suite inject a
    sign error.
    """
    if nlp.param_jacobian is None:
        raise ValueError("problem has no parameter Jacobian oracle")
    z, lam, mu = sol.z, sol.lam, sol.mu
    n, me, mi = nlp.n, nlp.n_eq, nlp.n_ineq
    Jg = nlp.eq_jac(z) if me else np.zeros((0, n))
    if mi:
        Jh = nlp.ineq_jac(z)
        slack = -nlp.ineq(z)
    else:
        Jh, slack = np.zeros((0, n)), np.zeros(0)
    strong_mu = mu >= opts.strict_tol
    strict = strong_mu | (slack >= opts.strict_tol)
    active = np.flatnonzero(slack < opts.strict_tol)
    order = active[np.argsort(-mu[active], kind="stable")]
    if active.size:
        pos = {a: i for i, a in enumerate(active)}
        kept = active[_independent_rows(Jg, Jh[active], [pos[a] for a in order], opts.dependency_tol)]
    else:
        kept = active
    dependent = np.setdiff1d(active, kept)
    weak = np.flatnonzero(~strict)
    weak = np.setdiff1d(weak, dependent)
    if weak.size:
        raise DegenerateSolutionError(
            f"weakly active inequalities {weak.tolist()} (mu={mu[weak]}, slack={slack[weak]})"
        )
    W = nlp.lagrangian_hessian(z, lam, mu)
    ma = kept.size
    dim = n + me + ma
    K = np.zeros((dim, dim))
    K[:n, :n] = W
    K[:n, n : n + me] = Jg.T
    K[n : n + me, :n] = Jg
    K[:n, n + me :] = Jh[kept].T
    K[n + me :, :n] = Jh[kept]
    dL, dG, dH = nlp.param_jacobian(z, lam, mu)
    npar = nlp.n_params
    rhs = np.vstack([
        np.reshape(dL, (n, npar)),
        np.reshape(dG, (me, npar)),
        np.reshape(dH, (mi, npar))[kept],
    ])
    if flip_param_sign:
        rhs = -rhs
    with np.errstate(all="ignore"):
        lu, piv, info = sla.lapack.dgetrf(K)
    if info > 0:
        raise SingularKKTError("singular KKT matrix", np.inf)
    anorm = np.abs(K).sum(axis=0).max()
    rcond, _ = dgecon(lu, anorm, norm="1")
    condition = 1.0 / rcond if rcond > 0 else np.inf
    if condition > opts.max_condition:
        raise SingularKKTError(f"KKT matrix condition estimate {condition:.3e}", condition)
    dsol = -sla.lu_solve((lu, piv), rhs, check_finite=False)
    jac = np.zeros((n + me + mi, npar))
    jac[: n + me] = dsol[: n + me]
    jac[n + me + kept] = dsol[n + me :]
    if not np.all(np.isfinite(jac)):
        raise SingularKKTError("non-finite sensitivity", condition)
    return SensitivityResult(jac, n, me, condition, kept, strict)


__all__ = [
    "SolverOptions", "QpData", "NlpProblem", "qp_problem", "PrimalDualSolution",
    "SensitivityResult", "SolverError", "SensitivityError", "DegenerateSolutionError",
    "SingularKKTError", "solve_qp", "brute_force_qp", "solve_sqp", "kkt_residual",
    "sensitivity",
]
