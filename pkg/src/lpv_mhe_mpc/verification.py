"""Oracle checks run by ``verify`` and by the acceptance tests.

Each check returns :class:`CheckResult` rows carrying the worst error seen
and the tolerance it was held to.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .learner import (
    CriticParams,
    LstdAccumulators,
    Transition,
    features_upsilon,
    jacobian_xi,
    lstd_accumulate,
)
from .lpv_plant import (
    SchedulingBounds,
    combine,
    discretize,
    msd_vertices,
    uniform_beta,
)
from .mhe import MheConfig, MheWindow, MovingHorizonEstimator, build_mhe, estimate, mhe_theta_slices
from .mpc import MpcConfig, beta_schedule, build_mpc, mpc_theta_slices, policy
from .nlp_solver import (
    SensitivityError,
    brute_force_qp,
    kkt_residual,
    SolverOptions,
    qp_problem,
    sensitivity,
    solve_qp,
)
from .params import ThetaVector

FD_STEP = 1e-5
# derivatives smaller than this are compared on an absolute scale; saturated
# inputs have exactly zero IFT sensitivity and pure solver noise under FD
REL_FLOOR = 1e-3
# central differences need solutions well below the production KKT tolerance
ORACLE_OPTS = SolverOptions(kkt_tol=1e-12)


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error <= self.tolerance)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: max error {self.max_error:.3e} (tol {self.tolerance:.1e}) {self.detail}".rstrip()


def _rel(fd, ift) -> float:
    fd, ift = np.asarray(fd), np.asarray(ift)
    return float(np.abs(fd - ift).max(initial=0.0) / max(np.abs(fd).max(initial=0.0), REL_FLOOR))


def default_model(C=None):
    return discretize(msd_vertices(SchedulingBounds.msd(), C), 0.05)


def random_qp(rng, n_max=4, m_max=6):
    """Random strictly convex QP with a known feasible point."""
    n = int(rng.integers(1, n_max + 1))
    m_in = int(rng.integers(0, m_max + 1))
    n_eq = int(rng.integers(0, n))  # keeps equality rows independent in general
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = rng.normal(size=n) * 2
    x_f = rng.normal(size=n)
    A_eq = rng.normal(size=(n_eq, n))
    b_eq = A_eq @ x_f
    A_in = rng.normal(size=(m_in, n))
    b_in = A_in @ x_f + rng.uniform(0.0, 1.0, m_in)
    return qp_problem(H, g, A_eq, b_eq, A_in, b_in)


def check_qp(n_instances: int = 50, seed: int = 0) -> list[CheckResult]:
    """Interior point + polish against active-set enumeration."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    gap, res = 0.0, 0.0
    for _ in range(n_instances):
        qp = random_qp(rng)
        sol = solve_qp(qp)
        ref = brute_force_qp(qp)
        gap = max(gap, abs(sol.cost - ref.cost) if sol.converged else np.inf)
        res = max(res, kkt_residual(qp, sol) if sol.converged else np.inf)
    dt = time.perf_counter() - t0
    return [
        CheckResult("qp objective vs brute force", gap, 1e-7, f"{n_instances} QPs", dt),
        CheckResult("qp kkt residual", res, 1e-8, f"{n_instances} QPs", dt),
    ]


def random_mpc_instance(rng, model, box: bool):
    cfg = MpcConfig(x_min=(-0.6, -1.0), x_max=(0.6, 1.0)) if box else MpcConfig()
    theta = ThetaVector.from_slices(mpc_theta_slices(model, cfg))
    theta.values += 0.05 * rng.normal(size=theta.size)
    theta = theta.replace(f=0.5 * rng.normal(size=3))
    theta = theta.project()
    x_hat = rng.uniform(-0.8, 0.8, model.n_states)
    sched = rng.dirichlet(np.ones(model.n_vertices), size=cfg.N + 1)
    return cfg, theta, x_hat, sched


def check_mpc_sensitivity(
    n_instances: int = 20, seed: int = 1, mutate: bool = False, tol: float = 1e-4
) -> CheckResult:
    """IFT Jacobians of the MPC policy against central differences."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = default_model()
    worst, done, skipped = 0.0, 0, 0
    while done < n_instances:
        cfg, theta, x_hat, sched = random_mpc_instance(rng, model, box=done % 2 == 1)
        nlp = build_mpc(model, x_hat, sched, theta, cfg)
        sol = solve_qp(nlp, opts=cfg.opts)
        try:
            sens = sensitivity(nlp, sol, cfg.opts, flip_param_sign=mutate).primal[0]
        except SensitivityError:
            skipped += 1
            continue

        def pi(p):
            n_th = theta.size
            th = ThetaVector(p[:n_th], theta.layout, theta.kinds)
            x = p[n_th : n_th + model.n_states]
            s = p[n_th + model.n_states :].reshape(sched.shape)
            return policy(model, x, s, th, cfg, with_sensitivity=False, check_schedule=False).pi[0]

        p0 = nlp.p
        fd = np.array([
            (pi(p0 + FD_STEP * e) - pi(p0 - FD_STEP * e)) / (2 * FD_STEP) for e in np.eye(p0.size)
        ])
        worst = max(worst, _rel(fd, sens))
        done += 1
    return CheckResult(
        "mpc sensitivity vs FD", worst, tol,
        f"{done} instances, {skipped} degenerate skipped", time.perf_counter() - t0,
    )


def simulate_window(rng, model, N=10, beta=None, noise=0.01):
    """Measurements of the design model at ``beta`` over ``N`` steps."""
    beta = rng.dirichlet(np.ones(model.n_vertices)) if beta is None else beta
    A, B, C = combine(model, beta)
    x = rng.uniform(-1, 1, model.n_states)
    prior = x + 0.05 * rng.normal(size=x.size)
    ys, us = [], []
    for _ in range(N):
        u = rng.uniform(-1, 1, model.n_inputs)
        x = A @ x + B @ u
        ys.append(C @ x + noise * rng.normal(size=C.shape[0]))
        us.append(u)
    bp = np.tile(uniform_beta(model.n_vertices), (N, 1))
    return MheWindow(ys, us, prior, 0, bp)


def random_full_theta(rng, model, mpc_cfg):
    slices = mhe_theta_slices(model.n_states, model.n_outputs) + mpc_theta_slices(model, mpc_cfg)
    theta = ThetaVector.from_slices(slices)
    theta.values += 0.05 * rng.normal(size=theta.size)
    theta = theta.replace(f=0.3 * rng.normal(size=3))
    return theta.project()


def check_mhe_sensitivity(n_instances: int = 5, seed: int = 2, tol: float = 1e-4, mutate: bool = False):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = default_model()
    cfg = MheConfig(opts=ORACLE_OPTS)
    worst, done, skipped = 0.0, 0, 0
    while done < n_instances:
        theta = random_full_theta(rng, model, MpcConfig())
        window = simulate_window(rng, model, cfg.N)
        ref = estimate(model, window, theta, cfg, with_sensitivity=False)
        nlp = build_mhe(model, window, theta, cfg)
        try:
            sens = sensitivity(nlp, ref.primal_dual, cfg.opts, flip_param_sign=mutate).primal
        except SensitivityError:
            skipped += 1
            continue
        idx = theta.indices(("L_A", "L_R"))

        def z_of(v):
            th = theta.copy()
            th.values[idx] = v
            return estimate(model, window, th, cfg, warm_start=ref.primal_dual.z, with_sensitivity=False).primal_dual.z

        v0 = theta.values[idx]
        fd = np.column_stack([
            (z_of(v0 + FD_STEP * e) - z_of(v0 - FD_STEP * e)) / (2 * FD_STEP) for e in np.eye(idx.size)
        ])
        worst = max(worst, _rel(fd, sens))
        done += 1
    return CheckResult(
        "mhe sensitivity vs FD", worst, tol,
        f"{done} instances, {skipped} degenerate skipped", time.perf_counter() - t0,
    )


LEARNED = ("L_P1", "L_P2", "L_P3", "L_P4", "f", "L_A", "L_R")


def composed_policy(model, window, theta, mhe_cfg, mpc_cfg):
    est = estimate(model, window, theta, mhe_cfg)
    sched, source = beta_schedule(est, mpc_cfg, model.n_vertices)
    sol = policy(model, est.x_k, sched, theta, mpc_cfg)
    return est, sol, source


def check_xi(n_instances: int = 10, seed: int = 3, tol: float = 1e-3) -> CheckResult:
    """Chained policy Jacobian against differences of theta -> MHE -> MPC -> pi."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = default_model()
    mhe_cfg, mpc_cfg = MheConfig(opts=ORACLE_OPTS), MpcConfig()
    worst, done, skipped = 0.0, 0, 0
    while done < n_instances:
        theta = random_full_theta(rng, model, mpc_cfg)
        window = simulate_window(rng, model, mhe_cfg.N)
        est, sol, source = composed_policy(model, window, theta, mhe_cfg, mpc_cfg)
        if not (est.valid and sol.valid):
            skipped += 1
            continue
        xi = jacobian_xi(sol, est, theta, source, LEARNED)[:, 0]
        idx = theta.indices(LEARNED)

        def pi(v):
            th = theta.copy()
            th.values[idx] = v
            e = estimate(model, window, th, mhe_cfg, warm_start=est.primal_dual.z, with_sensitivity=False)
            s, _ = beta_schedule(e, mpc_cfg, model.n_vertices)
            return policy(model, e.x_k, s, th, mpc_cfg, with_sensitivity=False).pi[0]

        v0 = theta.values[idx]
        fd = np.array([(pi(v0 + FD_STEP * e) - pi(v0 - FD_STEP * e)) / (2 * FD_STEP) for e in np.eye(idx.size)])
        worst = max(worst, _rel(fd, xi))
        done += 1
    return CheckResult(
        "composed policy jacobian vs FD", worst, tol,
        f"{done} instances, {skipped} degenerate skipped", time.perf_counter() - t0,
    )


def _excitation(k):
    return np.array([np.sin(0.7 * k) + 0.5 * np.sin(2.3 * k)])


def run_recovery(beta_star, output_weight: float, steps: int, C=None, x0=(0.5, -0.3)):
    """Run the estimator on noiseless data of the design model at ``beta_star``."""
    model = default_model(np.eye(2) if C is None else C)
    theta = ThetaVector.from_slices(
        mhe_theta_slices(model.n_states, model.n_outputs, output=output_weight * np.eye(model.n_outputs))
    )
    est = MovingHorizonEstimator(model, theta, MheConfig(N=10), with_sensitivity=False)
    A, B, C = combine(model, beta_star)
    x = np.asarray(x0, dtype=float)
    sol = est.reset(C @ x)
    for k in range(steps):
        u = _excitation(k)
        x = A @ x + B @ u
        sol = est.update(C @ x, u)
    return sol, x


def check_recovery() -> list[CheckResult]:
    t0 = time.perf_counter()
    e1 = np.array([1.0, 0.0, 0.0, 0.0])
    sol, x = run_recovery(e1, 1e6, 100)
    b_err = float(np.abs(sol.beta_k - e1).max())
    x_err = float(np.abs(sol.x_k - x).max())
    uni = uniform_beta(4)
    sol_u, _ = run_recovery(uni, 10.0, 60)
    u_err = float(np.abs(sol_u.beta_hat - uni).max())
    dt = time.perf_counter() - t0
    return [
        CheckResult("mhe vertex-1 weight recovery", b_err, 1e-6, "full state, N=10", dt),
        CheckResult("mhe vertex-1 state recovery", x_err, 1e-6, "full state, N=10", dt),
        CheckResult("mhe uniform weight recovery", u_err, 1e-4, "full state, excited input", dt),
    ]


def random_transitions(rng, count=100, n_theta=5, m=1, n=2):
    out = []
    for _ in range(count):
        a = rng.uniform(-1, 1, m)
        out.append(Transition(
            rng.normal(size=n), rng.dirichlet(np.ones(4)), rng.normal(size=1), a,
            a + rng.uniform(-0.1, 0.1, m), rng.normal(size=(n_theta, m)), float(rng.uniform(0, 2)),
            rng.normal(size=n), bool(rng.uniform() > 0.1),
        ))
    return out


def reference_accumulate(batch, gamma, nu, w, n_theta, n_ups):
    """Plain per-sample loop over the LSTD terms."""
    A_nu = np.zeros((n_ups, n_ups))
    b_nu = np.zeros(n_ups)
    A_w = np.zeros((n_theta, n_theta))
    b_w = np.zeros(n_theta)
    b_th = np.zeros(n_theta)
    count = 0
    for t in batch:
        if not t.valid:
            continue
        u0 = features_upsilon(t.x_hat)
        u1 = features_upsilon(t.x_next)
        psi = t.xi @ (t.a - t.pi)
        A_nu += np.outer(u0, u0 - gamma * u1)
        b_nu += u0 * t.L
        A_w += np.outer(psi, psi)
        b_w += (t.L + gamma * nu @ u1 - nu @ u0) * psi
        b_th += t.xi @ (t.xi.T @ w)
        count += 1
    return A_nu, b_nu, A_w, b_w, b_th, count


def check_lstd(n: int = 100, seed: int = 4, tol: float = 1e-12) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    n_theta, n_ups, gamma = 5, 6, 0.95
    batch = random_transitions(rng, n, n_theta)
    critic = CriticParams(rng.normal(size=n_ups), rng.normal(size=n_theta))
    acc = lstd_accumulate(batch, LstdAccumulators.zeros(n_ups, n_theta), gamma, critic)
    ref = reference_accumulate(batch, gamma, critic.nu, critic.w, n_theta, n_ups)
    got = (acc.A_nu, acc.b_nu, acc.A_w, acc.b_w, acc.b_theta)
    err = max(float(np.abs(g - r).max() / max(1.0, np.abs(r).max())) for g, r in zip(got, ref[:5]))
    if acc.count != ref[5]:
        err = np.inf
    return CheckResult("lstd accumulators vs per-sample loop", err, tol, f"{n} transitions",
                       time.perf_counter() - t0)


def check_invariants(rows) -> CheckResult:
    """Worst simplex and input-bound excess over episode rows."""
    worst = 0.0
    for r in rows:
        beta = np.asarray(r[8:12], dtype=float)
        worst = max(worst, abs(beta.sum() - 1.0) / 1e-8, -beta.min() / 1e-9, (abs(float(r[16])) - 1.0) / 1e-8)
    return CheckResult("simplex and input bounds", worst, 1.0, f"{len(rows)} steps (error in tolerance units)")


def run_all(mutate: bool = False, quick: bool = False) -> list[CheckResult]:
    from .experiment import ExperimentConfig, initial_theta, run_episode

    results = check_qp()
    results.append(check_mpc_sensitivity(5 if quick else 20, mutate=mutate))
    results.append(check_mhe_sensitivity(2 if quick else 5, mutate=mutate))
    results.append(check_xi(3 if quick else 10))
    results += check_recovery()
    results.append(check_lstd())
    cfg = ExperimentConfig(T_f=60 if quick else 200)
    t0 = time.perf_counter()
    res = run_episode(cfg, initial_theta(cfg), True, 7)
    inv = check_invariants(res.rows)
    inv.seconds = time.perf_counter() - t0
    results.append(inv)
    return results


__all__ = [
    "CheckResult", "check_qp", "check_mpc_sensitivity", "check_mhe_sensitivity", "check_xi",
    "check_recovery", "check_lstd", "check_invariants", "run_all", "reference_accumulate",
    "random_transitions", "run_recovery", "simulate_window",
]
