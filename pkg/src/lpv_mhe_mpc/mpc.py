"""Parameterized MPC over the polytopic model with a delayed weight schedule.

Decision vector ``[u_0..u_{N-1}, x_0..x_N, s_0..s_N]`` (slacks only when a
state box is configured). The objective, relative to the current time, is::

    sum_j g^j (x_j'W x_j + u_j'R u_j + f'[x_j; u_j] + w's_j) + g^N (x_N' P(b_N) x_N + w_f's_N)

with ``P(b) = sum_i b_i P_i`` and dynamics frozen at the scheduled weights,
so the problem is a convex QP. Input bounds are hard; the state box,
tightened by a learnable backoff, is softened by the slacks.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .lpv_plant import PolytopicModel, check_beta, uniform_beta
from .mhe import MheSolution
from .nlp_solver import (
    DEFAULT_OPTIONS,
    NlpProblem,
    PrimalDualSolution,
    SensitivityError,
    SolverError,
    SolverOptions,
    qp_problem,
    sensitivity,
    solve_qp,
)
from .params import (
    DIAG_FLOOR,
    ThetaVector,
    chol_factor,
    diag_positions,
    factor_product,
    factor_product_derivatives,
    tril_size,
)

logger = logging.getLogger(__name__)

INPUT_TOL = 1e-9


@dataclass(frozen=True)
class MpcConfig:
    N: int = 10
    gamma: float = 0.95
    slack_weight: float = 1e3
    terminal_slack_weight: float = 1e3
    u_min: tuple = (-1.0,)
    u_max: tuple = (1.0,)
    x_min: tuple | None = None
    x_max: tuple | None = None
    opts: SolverOptions = DEFAULT_OPTIONS

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("MPC horizon must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.slack_weight <= 0 or self.terminal_slack_weight <= 0:
            raise ValueError("slack weights must be positive")
        if np.any(np.asarray(self.u_min) >= np.asarray(self.u_max)):
            raise ValueError("input bounds must satisfy u_min < u_max")
        if (self.x_min is None) != (self.x_max is None):
            raise ValueError("state box needs both x_min and x_max")
        if self.x_min is not None and np.any(np.asarray(self.x_min) >= np.asarray(self.x_max)):
            raise ValueError("state bounds must satisfy x_min < x_max")

    @property
    def has_state_box(self) -> bool:
        return self.x_min is not None

    def n_backoff(self, n: int) -> int:
        return 2 * n if self.has_state_box else 0


def terminal_names(n_vertices: int) -> list[str]:
    return [f"L_P{i + 1}" for i in range(n_vertices)]


def mpc_slice_names(n_vertices: int) -> list[str]:
    return terminal_names(n_vertices) + ["f", "L_W", "L_Ru", "eps"]


def dare_fixed_point(A, B, Q, R, tol: float = 1e-10, max_iter: int = 100_000):
    """Riccati recursion iterated to a fixed point; ``None`` when it diverges."""
    P = np.array(Q, dtype=float)
    for _ in range(max_iter):
        BtP = B.T @ P
        P_new = Q + A.T @ P @ A - (BtP @ A).T @ np.linalg.solve(R + BtP @ B, BtP @ A)
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)) or np.abs(P_new).max() > 1e12:
            return None
        if np.abs(P_new - P).max() <= tol * max(1.0, np.abs(P_new).max()):
            return P_new
        P = P_new
    return None


def init_terminal_weights(model: PolytopicModel, W, R_u) -> list[np.ndarray]:
    """Per-vertex discrete Riccati solutions used as initial terminal weights."""
    if model.time_domain != "discrete":
        raise ValueError("terminal weights need a discrete-time model")
    W = np.atleast_2d(W)
    R_u = np.atleast_2d(R_u)
    out = []
    for i, v in enumerate(model.vertices):
        P = dare_fixed_point(v.A, v.B, W, R_u)
        if P is None:
            warnings.warn(f"Riccati iteration diverged for vertex {i + 1}; using identity")
            P = np.eye(model.n_states)
        out.append(P)
    return out


def mpc_theta_slices(model: PolytopicModel, cfg: MpcConfig, W=None, R_u=None, terminal=None):
    """Default MPC parameter slices (``W = diag(10, 1)``, ``R_u = 0.5``, Riccati ``P_i``)."""
    n, m = model.n_states, model.n_inputs
    W = np.diag([10.0] + [1.0] * (n - 1)) if W is None else np.atleast_2d(W)
    R_u = 0.5 * np.eye(m) if R_u is None else np.atleast_2d(R_u)
    terminal = init_terminal_weights(model, W, R_u) if terminal is None else terminal
    slices = [
        (name, chol_factor(P), ("factor", n))
        for name, P in zip(terminal_names(model.n_vertices), terminal)
    ]
    slices += [
        ("f", np.zeros(n + m), ("free",)),
        ("L_W", chol_factor(W), ("factor", n)),
        ("L_Ru", chol_factor(R_u), ("factor", m)),
    ]
    if cfg.has_state_box:
        half = 0.5 * (np.asarray(cfg.x_max, float) - np.asarray(cfg.x_min, float))
        slices.append(("eps", np.zeros(2 * n), ("box", np.concatenate([half, half]).tolist())))
    else:
        slices.append(("eps", np.zeros(0), ("box", [])))
    return slices


def check_mpc_theta(theta: ThetaVector, model: PolytopicModel, cfg: MpcConfig):
    n = model.n_states
    for name in terminal_names(model.n_vertices) + ["L_W"]:
        if np.any(theta[name][diag_positions(n)] < DIAG_FLOOR):
            raise ValueError(f"{name} diagonal below {DIAG_FLOOR}")
    if np.any(theta["L_Ru"][diag_positions(model.n_inputs)] < DIAG_FLOOR):
        raise ValueError(f"L_Ru diagonal below {DIAG_FLOOR}")
    eps = theta["eps"]
    if cfg.has_state_box:
        half = 0.5 * (np.asarray(cfg.x_max, float) - np.asarray(cfg.x_min, float))
        if eps.size != 2 * n or np.any(np.abs(eps) > np.concatenate([half, half]) + 1e-12):
            raise ValueError("constraint backoff outside half the box width")


@dataclass
class MpcSolution:
    pi: np.ndarray
    x_pred: np.ndarray  # (N+1, n)
    u_pred: np.ndarray  # (N, m)
    slacks: np.ndarray  # (N+1, n_h)
    dpi_dtheta: np.ndarray  # (m, n_theta_mpc) ordered as the MPC slices of theta
    dpi_dx: np.ndarray  # (m, n)
    dpi_dbeta: np.ndarray  # (m, N+1, l)
    status: str
    valid: bool
    cost: float
    theta_index: np.ndarray = field(repr=False, default=None)
    primal_dual: PrimalDualSolution | None = field(default=None, repr=False)


def beta_schedule(mhe: MheSolution, cfg: MpcConfig, n_vertices: int | None = None):
    """Delayed weight schedule ``b_{j|k} = b_hat_{k-N+j}`` for ``j = 0..N``.

    Returns ``(schedule, source)`` where ``source[j]`` is the MHE window
    stage feeding MPC stage ``j`` (``-1`` when no estimate exists yet and
    the uniform weights are used). Stage ``k-N`` is not a decision of the
    MHE, so it repeats the next estimate.
    """
    N = cfg.N
    l = mhe.beta_hat.shape[1] if n_vertices is None else n_vertices
    if mhe.t0 == mhe.k and mhe.beta_hat.shape[0] == 1:
        # cold start: only the initial guess exists
        return np.tile(mhe.beta_hat[0], (N + 1, 1)), -np.ones(N + 1, dtype=int)
    Ne = mhe.beta_hat.shape[0]
    if Ne > N:
        raise ValueError(f"MHE window of length {Ne} exceeds MPC horizon {N}")
    source = np.empty(N + 1, dtype=int)
    for j in range(N + 1):
        t = mhe.k - N + j  # absolute time wanted
        stage = t - mhe.t0  # MHE stage, weights exist for stages 1..Ne
        source[j] = min(max(stage, 1), Ne) - 1
    schedule = mhe.beta_hat[source]
    for b in schedule:
        check_beta(b, l)
    return schedule, source


class _MpcLayout:
    def __init__(self, model: PolytopicModel, cfg: MpcConfig):
        self.n, self.m, self.l = model.n_states, model.n_inputs, model.n_vertices
        self.N = cfg.N
        self.nh = cfg.n_backoff(self.n)
        self.nu = self.N * self.m
        self.nx = (self.N + 1) * self.n
        self.ns = (self.N + 1) * self.nh
        self.nv = self.nu + self.nx + self.ns
        self.n_eq = self.nx
        self.n_ineq = 2 * self.nu + 2 * self.ns

    def u(self, j):
        return slice(j * self.m, (j + 1) * self.m)

    def x(self, j):
        return slice(self.nu + j * self.n, self.nu + (j + 1) * self.n)

    def s(self, j):
        start = self.nu + self.nx + j * self.nh
        return slice(start, start + self.nh)


def _theta_blocks(theta: ThetaVector, model: PolytopicModel):
    names = mpc_slice_names(model.n_vertices)
    idx = theta.indices(names)
    offsets, start = {}, 0
    for name in names:
        size = theta[name].size
        offsets[name] = slice(start, start + size)
        start += size
    return idx, offsets


def build_mpc(
    model: PolytopicModel,
    x_hat,
    schedule,
    theta: ThetaVector,
    cfg: MpcConfig,
    check_schedule: bool = True,
) -> NlpProblem:
    """MPC QP with parameters ``p = [theta_mpc, x_hat, schedule.ravel()]``.

    ``check_schedule=False`` admits weights slightly off the simplex, which
    finite-difference probes of the schedule need.
    """
    if model.time_domain != "discrete":
        raise ValueError("the MPC needs a discrete-time model")
    check_mpc_theta(theta, model, cfg)
    lay = _MpcLayout(model, cfg)
    n, m, l, N, nh = lay.n, lay.m, lay.l, lay.N, lay.nh
    schedule = np.asarray(schedule, dtype=float).reshape(N + 1, l)
    if check_schedule:
        for b in schedule:
            check_beta(b, l)
    x_hat = np.asarray(x_hat, dtype=float).ravel()
    g = cfg.gamma
    disc = g ** np.arange(N + 1)
    th_idx, off = _theta_blocks(theta, model)
    n_th = th_idx.size
    Ps = [factor_product(theta[nm], n) for nm in terminal_names(l)]
    W = factor_product(theta["L_W"], n)
    Ru = factor_product(theta["L_Ru"], m)
    f = theta["f"]
    eps = theta["eps"]
    P_N = sum(b * P for b, P in zip(schedule[N], Ps))
    Asch = np.einsum("ji,inm->jnm", schedule, model.A)
    Bsch = np.einsum("ji,inm->jnm", schedule, model.B)

    H = np.zeros((lay.nv, lay.nv))
    q = np.zeros(lay.nv)
    for j in range(N):
        H[lay.u(j), lay.u(j)] = 2 * disc[j] * Ru
        H[lay.x(j), lay.x(j)] = 2 * disc[j] * W
        q[lay.x(j)] = disc[j] * f[:n]
        q[lay.u(j)] = disc[j] * f[n:]
    H[lay.x(N), lay.x(N)] = 2 * disc[N] * P_N
    if nh:
        for j in range(N + 1):
            wj = cfg.terminal_slack_weight if j == N else cfg.slack_weight
            q[lay.s(j)] = disc[j] * wj

    A_eq = np.zeros((lay.n_eq, lay.nv))
    b_eq = np.zeros(lay.n_eq)
    A_eq[:n, lay.x(0)] = np.eye(n)
    b_eq[:n] = x_hat
    for j in range(N):
        rows = slice(n * (j + 1), n * (j + 2))
        A_eq[rows, lay.x(j + 1)] = np.eye(n)
        A_eq[rows, lay.x(j)] = -Asch[j]
        A_eq[rows, lay.u(j)] = -Bsch[j]

    A_in = np.zeros((lay.n_ineq, lay.nv))
    b_in = np.zeros(lay.n_ineq)
    u_max = np.broadcast_to(np.asarray(cfg.u_max, float), (m,))
    u_min = np.broadcast_to(np.asarray(cfg.u_min, float), (m,))
    nu = lay.nu
    A_in[:nu, :nu] = np.eye(nu)
    b_in[:nu] = np.tile(u_max, N)
    A_in[nu : 2 * nu, :nu] = -np.eye(nu)
    b_in[nu : 2 * nu] = -np.tile(u_min, N)
    if nh:
        x_max = np.asarray(cfg.x_max, float)
        x_min = np.asarray(cfg.x_min, float)
        r0 = 2 * nu
        for j in range(N + 1):
            rows = slice(r0 + j * nh, r0 + (j + 1) * nh)
            blk = np.zeros((nh, lay.nv))
            blk[:n, lay.x(j)] = np.eye(n)
            blk[n:, lay.x(j)] = -np.eye(n)
            blk[:, lay.s(j)] = -np.eye(nh)
            A_in[rows] = blk
            b_in[rows] = np.concatenate([x_max - eps[:n], -(x_min + eps[n:])])
        r1 = r0 + lay.ns
        A_in[r1:, nu + lay.nx :] = -np.eye(lay.ns)

    n_p = n_th + n + (N + 1) * l
    p = np.concatenate([theta.values[th_idx], x_hat, schedule.ravel()])
    dPs = [factor_product_derivatives(theta[nm], n) for nm in terminal_names(l)]
    dW = factor_product_derivatives(theta["L_W"], n)
    dR = factor_product_derivatives(theta["L_Ru"], m)
    col_x = n_th
    col_b = n_th + n

    def param_jacobian(z, lam, mu):
        dL = np.zeros((lay.nv, n_p))
        dG = np.zeros((lay.n_eq, n_p))
        dH = np.zeros((lay.n_ineq, n_p))
        X = z[nu : nu + lay.nx].reshape(N + 1, n)
        U = z[:nu].reshape(N, m)
        xN = X[N]
        for i, name in enumerate(terminal_names(l)):
            cols = np.arange(off[name].start, off[name].stop)
            dL[lay.x(N), cols] = 2 * disc[N] * schedule[N, i] * (dPs[i] @ xN).T
        fcols = np.arange(off["f"].start, off["f"].stop)
        wcols = np.arange(off["L_W"].start, off["L_W"].stop)
        rcols = np.arange(off["L_Ru"].start, off["L_Ru"].stop)
        lam_dyn = lam[n:].reshape(N, n)
        for j in range(N):
            dL[lay.x(j), fcols[:n]] = disc[j] * np.eye(n)
            dL[lay.u(j), fcols[n:]] = disc[j] * np.eye(m)
            dL[lay.x(j), wcols] = 2 * disc[j] * (dW @ X[j]).T
            dL[lay.u(j), rcols] = 2 * disc[j] * (dR @ U[j]).T
            bcols = col_b + j * l + np.arange(l)
            dL[lay.x(j), bcols] = -np.einsum("inm,n->mi", model.A, lam_dyn[j])
            dL[lay.u(j), bcols] = -np.einsum("inm,n->mi", model.B, lam_dyn[j])
            rows = slice(n * (j + 1), n * (j + 2))
            dG[rows, bcols] = -(model.A @ X[j] + model.B @ U[j]).T
        bN = col_b + N * l + np.arange(l)
        dL[lay.x(N), bN] = 2 * disc[N] * np.stack([P @ xN for P in Ps], axis=1)
        dG[:n, col_x : col_x + n] = -np.eye(n)
        if nh:
            ecols = np.arange(off["eps"].start, off["eps"].stop)
            for j in range(N + 1):
                rows = 2 * nu + j * nh + np.arange(nh)
                dH[np.ix_(rows, ecols)] = np.eye(nh)
        return dL, dG, dH

    nlp = qp_problem(H, q, A_eq, b_eq, A_in, b_in, p=p, param_jacobian=param_jacobian)
    return nlp


def policy(
    model: PolytopicModel,
    x_hat,
    schedule,
    theta: ThetaVector,
    cfg: MpcConfig,
    warm_start: MpcSolution | None = None,
    with_sensitivity: bool = True,
    check_schedule: bool = True,
) -> MpcSolution:
    """First optimal input and its sensitivities to theta, the state estimate and the schedule."""
    lay = _MpcLayout(model, cfg)
    nlp = build_mpc(model, x_hat, schedule, theta, cfg, check_schedule)
    warm = warm_start.primal_dual if warm_start is not None else None
    sol = solve_qp(nlp, warm, cfg.opts)
    if not sol.converged:
        raise SolverError(
            f"MPC QP status {sol.status}; input bounds {cfg.u_min}..{cfg.u_max} may be contradictory"
        )
    z = sol.z
    n, m, l, N = lay.n, lay.m, lay.l, lay.N
    U = z[: lay.nu].reshape(N, m)
    # hard input bounds hold to solver accuracy; remove the last rounding
    pi = np.clip(U[0], np.asarray(cfg.u_min, float), np.asarray(cfg.u_max, float))
    X = z[lay.nu : lay.nu + lay.nx].reshape(N + 1, n)
    S = z[lay.nu + lay.nx :].reshape(N + 1, lay.nh)
    th_idx, _ = _theta_blocks(theta, model)
    n_th = th_idx.size
    dth = np.zeros((m, n_th))
    dx = np.zeros((m, n))
    db = np.zeros((m, N + 1, l))
    valid, status = True, sol.status
    if with_sensitivity:
        try:
            sens = sensitivity(nlp, sol, cfg.opts).primal[: m]
            dth = sens[:, :n_th]
            dx = sens[:, n_th : n_th + n]
            db = sens[:, n_th + n :].reshape(m, N + 1, l)
        except SensitivityError as exc:
            logger.debug("MPC sensitivity unavailable: %s", exc)
            valid, status = False, "degenerate"
    return MpcSolution(pi, X, U, S, dth, dx, db, status, valid, sol.cost, th_idx, sol)


class ModelPredictiveController:
    """Keeps the previous solution for warm starts; everything else is stateless."""

    def __init__(self, model: PolytopicModel, theta: ThetaVector, cfg: MpcConfig = MpcConfig()):
        if model.time_domain != "discrete":
            raise ValueError("the MPC needs a discrete-time model")
        check_mpc_theta(theta, model, cfg)
        self.model = model
        self.theta = theta
        self.cfg = cfg
        self.last: MpcSolution | None = None

    def __call__(self, mhe: MheSolution, with_sensitivity: bool = True) -> tuple[MpcSolution, np.ndarray]:
        schedule, source = beta_schedule(mhe, self.cfg, self.model.n_vertices)
        sol = policy(self.model, mhe.x_k, schedule, self.theta, self.cfg, self.last, with_sensitivity)
        self.last = sol
        return sol, source


__all__ = [
    "MpcConfig", "MpcSolution", "ModelPredictiveController", "beta_schedule", "build_mpc",
    "policy", "init_terminal_weights", "mpc_theta_slices", "mpc_slice_names", "uniform_beta",
    "dare_fixed_point",
]
