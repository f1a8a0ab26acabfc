"""Moving-horizon estimation of states and vertex weights.

The window at time ``k`` holds stages ``k-N .. k``. Stage 0 carries the
arrival cost towards the prior ``x_tilde``; stage ``s >= 1`` carries its own
weight vector ``beta_s`` which drives the transition into ``x_s`` and the
output map at ``x_s``::

    min  g^N |x_0 - x_tilde|^2_A + sum_s g^(N-s) (|y_s - C(b_s) x_s|^2_R + |b_s - b_prev_s|^2)
    s.t. x_s = A(b_s) x_{s-1} + B(b_s) u_{s-1},  sum(b_s) = 1,  0 <= b_s <= 1

Output innovations are substituted into the cost rather than kept as
decision variables. ``A = L_A L_A^T`` and ``R = L_R L_R^T`` are the learned
weights; their packed factors are the parameters of the NLP.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .lpv_plant import PolytopicModel, uniform_beta
from .nlp_solver import (
    DEFAULT_OPTIONS,
    NlpProblem,
    PrimalDualSolution,
    SensitivityError,
    SolverOptions,
    sensitivity,
    solve_sqp,
)
from .params import ThetaVector, chol_factor, factor_product, factor_product_derivatives, tril_size

logger = logging.getLogger(__name__)

MHE_SLICES = ("L_A", "L_R")
BETA_REPAIR_TOL = 1e-7


@dataclass(frozen=True)
class MheConfig:
    N: int = 10
    gamma: float = 0.95
    opts: SolverOptions = DEFAULT_OPTIONS

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("MHE window length must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("discount must lie in (0, 1)")


def mhe_theta_slices(n: int, e: int, arrival=None, output=None):
    """Default ``(name, packed factor, kind)`` slices: ``A = I``, ``R = 10 I``."""
    arrival = np.eye(n) if arrival is None else np.atleast_2d(arrival)
    output = 10.0 * np.eye(e) if output is None else np.atleast_2d(output)
    return [
        ("L_A", chol_factor(arrival), ("factor", n)),
        ("L_R", chol_factor(output), ("factor", e)),
    ]


@dataclass
class MheWindow:
    """Data of one estimation window.

    ``ys[s-1]`` is the measurement at stage ``s`` and ``us[s-1]`` the input
    applied between stages ``s-1`` and ``s``; ``t0`` is the absolute time of
    stage 0 whose prior is ``prior``.
    """

    ys: list
    us: list
    prior: np.ndarray
    t0: int
    beta_prev: np.ndarray  # (len(ys), l): previous estimates of each stage's weights

    @property
    def length(self) -> int:
        return len(self.ys)

    @property
    def k(self) -> int:
        return self.t0 + self.length


@dataclass
class MheSolution:
    x_hat: np.ndarray  # (len+1, n)
    beta_hat: np.ndarray  # (len, l)
    innovations: np.ndarray  # (len, e)
    dx_dtheta: np.ndarray  # (n, n_p) derivative of the latest state
    dbeta_dtheta: np.ndarray  # (len, l, n_p)
    status: str
    valid: bool
    k: int
    t0: int
    cost: float = 0.0
    iterations: int = 0
    primal_dual: PrimalDualSolution | None = field(default=None, repr=False)
    theta_names: tuple = MHE_SLICES

    @property
    def x_k(self) -> np.ndarray:
        return self.x_hat[-1]

    @property
    def beta_k(self) -> np.ndarray:
        return self.beta_hat[-1]


class _MheLayout:
    def __init__(self, model: PolytopicModel, length: int):
        self.n, self.m, self.e, self.l = (
            model.n_states, model.n_inputs, model.n_outputs, model.n_vertices
        )
        self.len = length
        self.nx = self.n * (length + 1)
        self.nv = self.nx + self.l * length
        self.n_eq = (self.n + 1) * length
        self.n_ineq = 2 * self.l * length

    def split(self, z):
        X = z[: self.nx].reshape(self.len + 1, self.n)
        Bt = z[self.nx :].reshape(self.len, self.l)
        return X, Bt

    def xcol(self, s):
        return slice(s * self.n, (s + 1) * self.n)

    def bcol(self, s):  # s = 1..len
        start = self.nx + (s - 1) * self.l
        return slice(start, start + self.l)


def build_mhe(
    model: PolytopicModel, window: MheWindow, theta: ThetaVector, cfg: MheConfig
) -> NlpProblem:
    """Parametric MHE NLP; the parameter vector is ``[L_A, L_R]`` packed."""
    if model.time_domain != "discrete":
        raise ValueError("the MHE needs a discrete-time model")
    Ne = window.length
    if Ne < 1:
        raise ValueError("window holds no measurements; cold start first")
    lay = _MheLayout(model, Ne)
    n, e, l = lay.n, lay.e, lay.l
    Av, Bv, Cv = model.A, model.B, model.C
    Y = np.asarray(window.ys, dtype=float).reshape(Ne, e)
    U = np.asarray(window.us, dtype=float).reshape(Ne, lay.m)
    Bp = np.asarray(window.beta_prev, dtype=float).reshape(Ne, l)
    prior = np.asarray(window.prior, dtype=float)
    vA, vR = theta["L_A"], theta["L_R"]
    Aw = factor_product(vA, n)
    Rw = factor_product(vR, e)
    g = cfg.gamma
    w0 = g**Ne
    ws = g ** (Ne - np.arange(1, Ne + 1))  # stage weights
    BU = np.einsum("inm,sm->sin", Bv, U)  # (Ne, l, n)

    cache = {}

    def parts(z):
        key = z.tobytes()
        if cache.get("key") != key:
            X, Bt = lay.split(z)
            Cb = np.einsum("si,iej->sej", Bt, Cv)
            r = Y - np.einsum("sej,sj->se", Cb, X[1:])
            CiX = np.einsum("iej,sj->sie", Cv, X[1:])
            Q = np.einsum("inj,sj->sin", Av, X[:-1]) + BU
            cache.update(key=key, X=X, Bt=Bt, Cb=Cb, r=r, CiX=CiX, Q=Q)
        return cache

    def cost(z):
        c = parts(z)
        dx0 = c["X"][0] - prior
        Rr = c["r"] @ Rw
        db = c["Bt"] - Bp
        return float(w0 * dx0 @ Aw @ dx0 + ws @ (np.sum(Rr * c["r"], 1) + np.sum(db * db, 1)))

    def cost_grad(z):
        c = parts(z)
        out = np.zeros(lay.nv)
        out[: n] = 2 * w0 * Aw @ (c["X"][0] - prior)
        Rr = c["r"] @ Rw
        gx = -2 * ws[:, None] * np.einsum("sej,se->sj", c["Cb"], Rr)
        out[n : lay.nx] = gx.ravel()
        gb = -2 * ws[:, None] * np.einsum("sie,se->si", c["CiX"], Rr) + 2 * ws[:, None] * (c["Bt"] - Bp)
        out[lay.nx :] = gb.ravel()
        return out

    def eq(z):
        c = parts(z)
        dyn = c["X"][1:] - np.einsum("si,sin->sn", c["Bt"], c["Q"])
        return np.concatenate([dyn.ravel(), c["Bt"].sum(1) - 1.0])

    J_static = np.zeros((lay.n_eq, lay.nv))
    for s in range(1, Ne + 1):
        J_static[(s - 1) * n : s * n, lay.xcol(s)] = np.eye(n)
        J_static[n * Ne + s - 1, lay.bcol(s)] = 1.0

    def eq_jac(z):
        c = parts(z)
        J = J_static.copy()
        Ab = np.einsum("si,inj->snj", c["Bt"], Av)
        for s in range(1, Ne + 1):
            rows = slice((s - 1) * n, s * n)
            J[rows, lay.xcol(s - 1)] = -Ab[s - 1]
            J[rows, lay.bcol(s)] = -c["Q"][s - 1].T
        return J

    Jin = np.zeros((lay.n_ineq, lay.nv))
    Jin[: l * Ne, lay.nx :] = -np.eye(l * Ne)
    Jin[l * Ne :, lay.nx :] = np.eye(l * Ne)

    def ineq(z):
        b = z[lay.nx :]
        return np.concatenate([-b, b - 1.0])

    eye_l = np.eye(l)

    def hessian(z, lam, mu):
        c = parts(z)
        Hm = np.zeros((lay.nv, lay.nv))
        Hm[:n, :n] = 2 * w0 * Aw
        Rr = c["r"] @ Rw
        lam_dyn = np.asarray(lam[: n * Ne]).reshape(Ne, n)
        w2 = 2 * ws[:, None, None]
        Cb, CiX = c["Cb"], c["CiX"]  # (Ne, e, n), (Ne, l, e)
        RCb = np.einsum("ef,sfj->sej", Rw, Cb)
        Hxx = w2 * np.einsum("sej,sek->sjk", Cb, RCb)
        Hbb = w2 * (np.einsum("sie,ef,skf->sik", CiX, Rw, CiX) + eye_l)
        # d^2/dx_s dbeta_i : 2w C(b)^T R C_i x_s - 2w C_i^T R r_s
        cross = w2 * (np.einsum("sej,sie->sji", RCb, CiX) - np.einsum("iej,se->sji", Cv, Rr))
        # constraint curvature: -lam_s^T A_i on (x_{s-1}, beta_{s,i})
        cc = -np.einsum("inj,sn->sji", Av, lam_dyn)
        for s in range(1, Ne + 1):
            xs, bs, xp = lay.xcol(s), lay.bcol(s), lay.xcol(s - 1)
            Hm[xs, xs] += Hxx[s - 1]
            Hm[bs, bs] += Hbb[s - 1]
            Hm[xs, bs] += cross[s - 1]
            Hm[bs, xs] += cross[s - 1].T
            Hm[xp, bs] += cc[s - 1]
            Hm[bs, xp] += cc[s - 1].T
        return Hm

    dA = factor_product_derivatives(vA, n)
    dR = factor_product_derivatives(vR, e)
    nA, nR = tril_size(n), tril_size(e)

    def param_jacobian(z, lam, mu):
        c = parts(z)
        D = np.zeros((lay.nv, nA + nR))
        D[:n, :nA] = (2 * w0 * dA @ (c["X"][0] - prior)).T
        dRr = np.einsum("kef,sf->kse", dR, c["r"])  # (nR, Ne, e)
        gx = -2 * ws[None, :, None] * np.einsum("sej,kse->ksj", c["Cb"], dRr)
        D[n : lay.nx, nA:] = gx.reshape(nR, -1).T
        gb = -2 * ws[None, :, None] * np.einsum("sie,kse->ksi", c["CiX"], dRr)
        D[lay.nx :, nA:] = gb.reshape(nR, -1).T
        return D, np.zeros((lay.n_eq, nA + nR)), np.zeros((lay.n_ineq, nA + nR))

    return NlpProblem(
        n=lay.nv,
        n_eq=lay.n_eq,
        n_ineq=lay.n_ineq,
        cost=cost,
        cost_grad=cost_grad,
        eq=eq,
        eq_jac=eq_jac,
        ineq=ineq,
        ineq_jac=lambda z: Jin,
        lagrangian_hessian=hessian,
        param_jacobian=param_jacobian,
        p=np.concatenate([vA, vR]),
        kind="bilinear-nlp",
    )


def _rollout_guess(model: PolytopicModel, window: MheWindow, x_start=None):
    """Initial primal point: propagate the prior through the model with ``beta_prev``."""
    x = np.asarray(window.prior if x_start is None else x_start, dtype=float)
    X = [x]
    for s in range(window.length):
        b = window.beta_prev[s]
        A = np.tensordot(b, model.A, axes=1)
        B = np.tensordot(b, model.B, axes=1)
        x = A @ x + B @ np.atleast_1d(window.us[s])
        X.append(x)
    return np.concatenate([np.ravel(X), np.ravel(window.beta_prev)])


def _repair_beta(B):
    lo, hi = B.min(), B.max()
    viol = max(-lo, hi - 1.0, np.max(np.abs(B.sum(1) - 1.0)), 0.0)
    if viol > BETA_REPAIR_TOL:
        return None
    B = np.clip(B, 0.0, 1.0)
    return B / B.sum(1, keepdims=True)


def estimate(
    model: PolytopicModel,
    window: MheWindow,
    theta: ThetaVector,
    cfg: MheConfig,
    warm_start: np.ndarray | None = None,
    warm_multipliers: tuple | None = None,
    with_sensitivity: bool = True,
) -> MheSolution:
    """Solve the MHE NLP and differentiate its solution w.r.t. ``[L_A, L_R]``.

    Raises :class:`~lpv_mhe_mpc.nlp_solver.SolverError` when the SQP fails;
    callers decide on a fallback.
    """
    from .nlp_solver import SolverError

    n, l = model.n_states, model.n_vertices
    n_p = theta["L_A"].size + theta["L_R"].size
    Ne = window.length
    if Ne == 0:
        b = np.atleast_2d(window.beta_prev) if np.size(window.beta_prev) else uniform_beta(l)[None]
        return MheSolution(
            np.asarray(window.prior, dtype=float)[None], b[-1:].copy(), np.zeros((0, model.n_outputs)),
            np.zeros((n, n_p)), np.zeros((1, l, n_p)), "converged", True, window.k, window.t0,
        )
    nlp = build_mhe(model, window, theta, cfg)
    z0 = _rollout_guess(model, window) if warm_start is None else np.asarray(warm_start, dtype=float)
    lam0 = mu0 = None
    if warm_multipliers is not None:
        lam0, mu0 = warm_multipliers
    lay = _MheLayout(model, Ne)
    b0 = z0[lay.nx :]
    warm_active = np.concatenate([np.flatnonzero(b0 <= 1e-12), l * Ne + np.flatnonzero(b0 >= 1 - 1e-12)])
    sol = solve_sqp(nlp, z0, cfg.opts, lam0, mu0, warm_active)
    if not sol.converged:
        raise SolverError(f"MHE SQP ended with status {sol.status} (KKT {sol.kkt_residual:.2e})")
    X, Bt = lay.split(sol.z)
    Bt = _repair_beta(Bt)
    if Bt is None:
        raise SolverError("MHE weights left the simplex beyond repair tolerance")
    Cb = np.einsum("si,iej->sej", Bt, model.C)
    Y = np.asarray(window.ys, dtype=float).reshape(Ne, -1)
    innov = Y - np.einsum("sej,sj->se", Cb, X[1:])
    valid = True
    dx = np.zeros((n, n_p))
    db = np.zeros((Ne, l, n_p))
    status = sol.status
    if with_sensitivity:
        try:
            sens = sensitivity(nlp, sol, cfg.opts).primal
            dx = sens[lay.xcol(Ne)]
            db = sens[lay.nx :].reshape(Ne, l, n_p)
        except SensitivityError as exc:
            logger.debug("MHE sensitivity unavailable: %s", exc)
            valid = False
            status = "degenerate"
    return MheSolution(
        X.copy(), Bt, innov, dx, db, status, valid, window.k, window.t0,
        sol.cost, sol.iterations, sol,
    )


def cold_start(y0, n_states: int, n_vertices: int) -> MheWindow:
    """Empty window at time 0 with prior ``[y0, 0, ...]`` and uniform weights."""
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    prior = np.zeros(n_states)
    prior[: y0.size] = y0[:n_states]
    return MheWindow([], [], prior, 0, np.zeros((0, n_vertices)))


def advance_prior(solution: MheSolution) -> np.ndarray:
    """Prior for the next window: this window's estimate of its second stage."""
    if solution.x_hat.shape[0] < 2:
        return solution.x_hat[0].copy()
    return solution.x_hat[1].copy()


class MovingHorizonEstimator:
    """Stateful estimator that slides the window, warm-starts and falls back.

    Call :meth:`reset` with the first measurement, then :meth:`update` with
    every new measurement and the input applied since the previous one.
    """

    def __init__(
        self,
        model: PolytopicModel,
        theta: ThetaVector,
        cfg: MheConfig = MheConfig(),
        with_sensitivity: bool = True,
    ):
        if model.time_domain != "discrete":
            raise ValueError("the MHE needs a discrete-time model")
        self.model = model
        self.theta = theta
        self.cfg = cfg
        self.window: MheWindow | None = None
        self.last: MheSolution | None = None
        self.failures = 0
        self.with_sensitivity = with_sensitivity

    def reset(self, y0) -> MheSolution:
        self.window = cold_start(y0, self.model.n_states, self.model.n_vertices)
        self._beta_times = {}
        self._warm = None
        self.last = estimate(self.model, self.window, self.theta, self.cfg)
        self._last_beta = uniform_beta(self.model.n_vertices)
        return self.last

    def _previous_beta(self, t):
        return self._beta_times.get(t, self._last_beta)

    def update(self, y, u_prev) -> MheSolution:
        if self.window is None:
            raise RuntimeError("call reset() with the first measurement first")
        w = self.window
        ys = deque(w.ys, maxlen=None)
        us = deque(w.us, maxlen=None)
        ys.append(np.atleast_1d(np.asarray(y, dtype=float)))
        us.append(np.atleast_1d(np.asarray(u_prev, dtype=float)))
        t0, prior = w.t0, w.prior
        shifted = len(ys) > self.cfg.N
        if shifted:
            ys.popleft()
            us.popleft()
            prior = advance_prior(self.last) if self.last.x_hat.shape[0] >= 2 else prior
            t0 += 1
        Ne = len(ys)
        beta_prev = np.array([self._previous_beta(t) for t in range(t0 + 1, t0 + Ne + 1)])
        self.window = MheWindow(list(ys), list(us), np.asarray(prior, dtype=float), t0, beta_prev)
        warm, mult = self._warm_start(shifted)
        try:
            sol = estimate(
                self.model, self.window, self.theta, self.cfg, warm, mult, self.with_sensitivity
            )
        except Exception as exc:  # noqa: BLE001 - any solver breakdown falls back
            logger.warning("MHE failed at k=%d: %s", self.window.k, exc)
            self.failures += 1
            sol = self._fallback()
        self._remember(sol)
        self.last = sol
        return sol

    def _warm_start(self, shifted):
        """Shift the previous solution by one stage and append a model prediction."""
        last, w = self.last, self.window
        if last is None or last.primal_dual is None:
            return None, None
        n, l = self.model.n_states, self.model.n_vertices
        drop = 1 if shifted else 0
        X = last.x_hat[drop:]
        b_new = w.beta_prev[-1]
        A = np.tensordot(b_new, self.model.A, axes=1)
        B = np.tensordot(b_new, self.model.B, axes=1)
        X = np.vstack([X, A @ X[-1] + B @ w.us[-1]])
        if shifted:
            X[0] = w.prior
        z0 = np.concatenate([X.ravel(), w.beta_prev.ravel()])
        pd = last.primal_dual
        Ne_old = last.beta_hat.shape[0]
        lam_dyn = pd.lam[: n * Ne_old].reshape(Ne_old, n)[drop:]
        lam_sx = pd.lam[n * Ne_old :][drop:]
        lam = np.concatenate([np.vstack([lam_dyn, lam_dyn[-1:]]).ravel(), np.append(lam_sx, lam_sx[-1])])
        mu_lo = pd.mu[: l * Ne_old].reshape(Ne_old, l)[drop:]
        mu_hi = pd.mu[l * Ne_old :].reshape(Ne_old, l)[drop:]
        mu = np.concatenate([np.vstack([mu_lo, mu_lo[-1:]]).ravel(), np.vstack([mu_hi, mu_hi[-1:]]).ravel()])
        return z0, (lam, mu)

    def _fallback(self) -> MheSolution:
        w, last = self.window, self.last
        z = _rollout_guess(self.model, w)
        lay = _MheLayout(self.model, w.length)
        X, Bt = lay.split(z)
        n_p = self.theta["L_A"].size + self.theta["L_R"].size
        return MheSolution(
            X, Bt, np.zeros((w.length, self.model.n_outputs)),
            np.zeros((self.model.n_states, n_p)), np.zeros((w.length, self.model.n_vertices, n_p)),
            "fallback", False, w.k, w.t0,
        )

    def _remember(self, sol: MheSolution):
        for s in range(sol.beta_hat.shape[0]):
            self._beta_times[sol.t0 + 1 + s] = sol.beta_hat[s]
        for t in [t for t in self._beta_times if t <= sol.t0]:
            del self._beta_times[t]
        if sol.beta_hat.shape[0]:
            self._last_beta = sol.beta_hat[-1]
