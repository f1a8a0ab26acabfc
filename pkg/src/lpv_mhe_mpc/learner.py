"""Compatible deterministic actor-critic with a batch LSTD critic.

The policy Jacobian chains through the estimator::

    Xi = d pi/d theta + d x_hat/d theta . d pi/d x_hat + d b_hat/d theta . d pi/d b_hat

The critic is ``Q(x, a) = V_nu(x) + w' Psi`` with ``V_nu = nu' Upsilon(x)``
and compatible features ``Psi = Xi (a - pi)``; ``w`` then estimates the
policy gradient direction ``E[Xi Xi' w]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable

import numpy as np
import scipy.linalg

from .mhe import MHE_SLICES, MheSolution
from .mpc import MpcSolution
from .params import ThetaVector

logger = logging.getLogger(__name__)

CRITIC_RIDGE = 1e-6
MAX_CONDITION = 1e12
SAMPLE_FLOOR_FACTOR = 10
MAX_HALVINGS = 3


def stage_cost(y, a, Q_L=1.0, R_L=0.1) -> float:
    """Quadratic RL stage cost ``y'Q_L y + a'R_L a``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    Q_L = np.atleast_2d(Q_L) if np.ndim(Q_L) else Q_L * np.eye(y.size)
    R_L = np.atleast_2d(R_L) if np.ndim(R_L) else R_L * np.eye(a.size)
    return float(y @ Q_L @ y + a @ R_L @ a)


def features_upsilon(x) -> np.ndarray:
    """All monomials of degree <= 2: ``[1, x_1..x_n, x_i x_j (i <= j)]``."""
    x = np.asarray(x, dtype=float).ravel()
    quad = [x[i] * x[j] for i, j in combinations_with_replacement(range(x.size), 2)]
    return np.concatenate([[1.0], x, quad])


def n_upsilon(n: int) -> int:
    return (n + 1) * (n + 2) // 2


def jacobian_xi(
    mpc: MpcSolution,
    mhe: MheSolution,
    theta: ThetaVector,
    source: np.ndarray,
    learned=None,
) -> np.ndarray:
    """Total policy Jacobian restricted to ``learned`` slices, shape ``(n_learned, m)``.

    ``source[j]`` is the MHE stage feeding MPC stage ``j`` (``-1``: none),
    as returned by :func:`~lpv_mhe_mpc.mpc.beta_schedule`.
    """
    learned = theta.names if learned is None else list(learned)
    m = mpc.pi.size
    full = np.zeros((m, theta.size))
    if mpc.dpi_dtheta.shape[1] != mpc.theta_index.size:
        raise ValueError("MPC sensitivity does not match its theta layout")
    full[:, mpc.theta_index] = mpc.dpi_dtheta
    mhe_idx = theta.indices(mhe.theta_names)
    if mhe.dx_dtheta.shape[1] != mhe_idx.size:
        raise ValueError("MHE sensitivity does not match the theta layout")
    indirect = mpc.dpi_dx @ mhe.dx_dtheta
    for j, s in enumerate(source):
        if s >= 0:
            indirect = indirect + mpc.dpi_dbeta[:, j, :] @ mhe.dbeta_dtheta[s]
    full[:, mhe_idx] += indirect
    return full[:, theta.indices(learned)].T


@dataclass
class Transition:
    x_hat: np.ndarray
    beta_hat: np.ndarray
    y: np.ndarray
    a: np.ndarray
    pi: np.ndarray
    xi: np.ndarray  # (n_theta, m)
    L: float
    x_next: np.ndarray
    valid: bool = True


def features_psi(t: Transition) -> np.ndarray:
    return t.xi @ (np.atleast_1d(t.a) - np.atleast_1d(t.pi))


@dataclass
class CriticParams:
    nu: np.ndarray
    w: np.ndarray
    condition: float = 1.0
    ridge: float = CRITIC_RIDGE

    def value(self, x) -> float:
        return float(self.nu @ features_upsilon(x))


@dataclass
class LstdAccumulators:
    A_nu: np.ndarray
    b_nu: np.ndarray
    A_w: np.ndarray
    b_w: np.ndarray
    b_theta: np.ndarray
    count: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, n_ups: int, n_theta: int) -> "LstdAccumulators":
        return cls(
            np.zeros((n_ups, n_ups)), np.zeros(n_ups), np.zeros((n_theta, n_theta)),
            np.zeros(n_theta), np.zeros(n_theta),
        )

    def merge(self, other: "LstdAccumulators") -> "LstdAccumulators":
        return LstdAccumulators(
            self.A_nu + other.A_nu, self.b_nu + other.b_nu, self.A_w + other.A_w,
            self.b_w + other.b_w, self.b_theta + other.b_theta,
            self.count + other.count, self.skipped + other.skipped,
        )


def _valid(batch):
    good = [t for t in batch if t.valid and np.all(np.isfinite(t.xi))]
    return good, len(batch) - len(good)


def accumulate_value(batch, acc: LstdAccumulators, gamma: float) -> LstdAccumulators:
    """First pass: ``A_nu += U_k (U_k - g U_{k+1})'``, ``b_nu += U_k L_k``."""
    good, skipped = _valid(batch)
    if not good:
        return LstdAccumulators(acc.A_nu.copy(), acc.b_nu.copy(), acc.A_w.copy(), acc.b_w.copy(),
                                acc.b_theta.copy(), acc.count, acc.skipped + skipped)
    U = np.array([features_upsilon(t.x_hat) for t in good])
    U1 = np.array([features_upsilon(t.x_next) for t in good])
    L = np.array([t.L for t in good])
    return LstdAccumulators(
        acc.A_nu + U.T @ (U - gamma * U1), acc.b_nu + U.T @ L,
        acc.A_w.copy(), acc.b_w.copy(), acc.b_theta.copy(), acc.count + len(good), acc.skipped + skipped,
    )


def lstd_accumulate(
    batch, acc: LstdAccumulators, gamma: float, critic: CriticParams, value_pass: bool = True
) -> LstdAccumulators:
    """Add the per-sample LSTD terms of ``batch``.

    With ``value_pass`` the value terms are added as well; the advantage and
    gradient terms use ``critic.nu`` for the TD error and ``critic.w`` for
    ``b_theta``. Invalid transitions are skipped and counted.
    """
    good, skipped = _valid(batch)
    out = accumulate_value(batch, acc, gamma) if value_pass else LstdAccumulators(
        acc.A_nu.copy(), acc.b_nu.copy(), acc.A_w.copy(), acc.b_w.copy(), acc.b_theta.copy(),
        acc.count + len(good), acc.skipped + skipped,
    )
    if not good:
        return out
    Psi = np.array([features_psi(t) for t in good])
    U = np.array([features_upsilon(t.x_hat) for t in good])
    U1 = np.array([features_upsilon(t.x_next) for t in good])
    L = np.array([t.L for t in good])
    td = L + gamma * U1 @ critic.nu - U @ critic.nu
    Xi = np.stack([t.xi for t in good])  # (K, n_theta, m)
    XtW = np.einsum("kim,i->km", Xi, critic.w)
    out.A_w += Psi.T @ Psi
    out.b_w += Psi.T @ td
    out.b_theta += np.einsum("kim,km->i", Xi, XtW)
    return out


def _ridge_solve(A, b, ridge):
    M = A + ridge * np.eye(A.shape[0])
    lu, piv = scipy.linalg.lu_factor(M)
    anorm = np.linalg.norm(M, 1)
    rcond = scipy.linalg.lapack.dgecon(lu, anorm, norm="1")[0]
    cond = np.inf if rcond == 0 else 1.0 / rcond
    return scipy.linalg.lu_solve((lu, piv), b), cond


class CriticRejected(RuntimeError):
    pass


def sample_floor(n_ups: int, n_theta: int) -> int:
    return SAMPLE_FLOOR_FACTOR * max(n_ups, n_theta)


def critic_solve_value(acc: LstdAccumulators, ridge: float = CRITIC_RIDGE):
    nu, cond = _ridge_solve(acc.A_nu, acc.b_nu, ridge)
    if cond > MAX_CONDITION or not np.all(np.isfinite(nu)):
        raise CriticRejected(f"value system condition {cond:.2e}")
    return nu, cond


def critic_solve(acc: LstdAccumulators, ridge: float = CRITIC_RIDGE, nu=None) -> CriticParams:
    """Solve ``(A + ridge I) x = b`` for ``nu`` and ``w``.

    Raises :class:`CriticRejected` when the batch is below the sample floor
    or either system is too ill-conditioned.
    """
    floor = sample_floor(acc.A_nu.shape[0], acc.A_w.shape[0])
    if acc.count < floor:
        raise CriticRejected(f"{acc.count} valid samples, need {floor}")
    cond_nu = 1.0
    if nu is None:
        nu, cond_nu = critic_solve_value(acc, ridge)
    w, cond_w = _ridge_solve(acc.A_w, acc.b_w, ridge)
    if cond_w > MAX_CONDITION or not np.all(np.isfinite(w)):
        raise CriticRejected(f"advantage system condition {cond_w:.2e}")
    return CriticParams(nu, w, max(cond_nu, cond_w), ridge)


def fit_critic(batch, gamma: float, n_ups: int, n_theta: int, ridge: float = CRITIC_RIDGE):
    """Two-pass batch fit: ``nu`` first, then ``w`` and ``b_theta`` from it."""
    acc = accumulate_value(batch, LstdAccumulators.zeros(n_ups, n_theta), gamma)
    floor = sample_floor(n_ups, n_theta)
    if acc.count < floor:
        raise CriticRejected(f"{acc.count} valid samples, need {floor}")
    if not any(np.any(features_psi(t) != 0) for t in batch if t.valid):
        raise CriticRejected("zero exploration: advantage features vanish")
    nu, cond_nu = critic_solve_value(acc, ridge)
    zeros = LstdAccumulators.zeros(n_ups, n_theta)
    adv = lstd_accumulate(batch, zeros, gamma, CriticParams(nu, np.zeros(n_theta)), value_pass=False)
    w, cond_w = _ridge_solve(adv.A_w, adv.b_w, ridge)
    if cond_w > MAX_CONDITION or not np.all(np.isfinite(w)):
        raise CriticRejected(f"advantage system condition {cond_w:.2e}")
    critic = CriticParams(nu, w, max(cond_nu, cond_w), ridge)
    # b_theta needs the fitted w, hence the extra pass
    grad = lstd_accumulate(batch, zeros, gamma, critic, value_pass=False)
    acc.A_w, acc.b_w, acc.b_theta = grad.A_w, grad.b_w, grad.b_theta
    return critic, acc


@dataclass
class UpdateResult:
    theta: ThetaVector
    alpha: float
    rejected: bool
    tries: int = 0
    reason: str = ""
    step: np.ndarray = field(default=None, repr=False)


def policy_update(
    theta: ThetaVector,
    b_theta,
    alpha: float,
    count: int = 1,
    learned=None,
    probe: Callable[[ThetaVector], bool] | None = None,
    max_halvings: int = MAX_HALVINGS,
) -> UpdateResult:
    """Projected step ``theta - alpha b_theta / count`` on the ``learned`` slices.

    ``probe(theta')`` returns ``False`` when a solve fails under the
    candidate; the step is then halved, at most ``max_halvings`` times.
    """
    b_theta = np.asarray(b_theta, dtype=float)
    if not np.all(np.isfinite(b_theta)):
        raise ValueError("non-finite policy gradient")
    learned = theta.names if learned is None else list(learned)
    idx = theta.indices(learned)
    if b_theta.size != idx.size:
        raise ValueError(f"gradient has {b_theta.size} entries, {idx.size} learned")
    if alpha == 0 or not np.any(b_theta) or count <= 0:
        return UpdateResult(theta.copy(), alpha, False, 0)
    step = b_theta / count
    a = alpha
    for attempt in range(max_halvings + 1):
        cand = theta.copy()
        cand.values[idx] -= a * step
        cand = cand.project()
        if probe is None or probe(cand):
            return UpdateResult(cand, a, False, attempt + 1, step=step)
        logger.info("probe failed for step %.3g, halving", a)
        a *= 0.5
    return UpdateResult(theta.copy(), alpha, True, max_halvings + 1, "probe failures", step)


__all__ = [
    "stage_cost", "features_upsilon", "features_psi", "jacobian_xi", "Transition",
    "CriticParams", "LstdAccumulators", "lstd_accumulate", "accumulate_value", "critic_solve",
    "fit_critic", "policy_update", "CriticRejected", "UpdateResult", "n_upsilon", "MHE_SLICES",
]
