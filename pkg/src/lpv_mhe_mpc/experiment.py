"""Closed-loop episodes, the learning loop and CSV artifacts.

A run directory holds ``config.json`` (the exact configuration, seeds
included), episode CSVs, ``learning_trace.csv`` and theta snapshots.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .learner import (
    CriticRejected,
    Transition,
    fit_critic,
    jacobian_xi,
    n_upsilon,
    policy_update,
    stage_cost,
)
from .lpv_plant import (
    SCHEDULE_MODES,
    SIMPLEX_NEG_TOL,
    SIMPLEX_SUM_TOL,
    PolytopicModel,
    SchedulingBounds,
    discretize,
    measure,
    msd_vertices,
    plant_step,
    sample_schedule,
    true_beta,
)
from .mhe import MheConfig, MovingHorizonEstimator, mhe_theta_slices
from .mpc import ModelPredictiveController, MpcConfig, mpc_theta_slices, policy
from .nlp_solver import SolverError
from .params import ThetaVector

logger = logging.getLogger(__name__)

INPUT_BOUND_TOL = 1e-8

EPISODE_COLUMNS = (
    ["episode", "k", "t", "y", "x1_true", "x2_true", "x1_hat", "x2_hat"]
    + [f"beta{i}" for i in range(1, 5)]
    + [f"beta{i}_true" for i in range(1, 5)]
    + ["u_applied", "u_policy", "L", "valid"]
)


class ConfigError(ValueError):
    """Invalid experiment configuration or theta file (exit code 2)."""


class RunAborted(RuntimeError):
    """Fatal runtime failure of a run (exit code 3)."""


@dataclass
class ExperimentConfig:
    """Flat experiment definition; every key maps 1:1 to the JSON file."""

    true_k: tuple = (0.5, 2.0)
    true_d: tuple = (0.0, 0.2)
    design_k: tuple = (1.0, 2.0)
    design_d: tuple = (0.0, 0.5)
    mass: float = 1.0
    h: float = 0.05
    N: int = 10
    gamma: float = 0.95
    T_f: int = 200
    episodes_per_iteration: int = 5
    iterations: int = 60
    alpha: float = 1e-3
    exploration: float = 0.1
    seed: int = 0
    eval_seeds: tuple = (1001, 1002, 1003)
    theta_init: dict = field(default_factory=dict)
    learned: tuple = ("L_P1", "L_P2", "L_P3", "L_P4", "f", "L_A", "L_R")
    schedule_mode: str = "constant-per-episode"
    noise_std: float = 0.0
    full_state: bool = False
    Q_L: float = 1.0
    R_L: float = 0.1
    u_min: float = -1.0
    u_max: float = 1.0
    x_min: tuple | None = None
    x_max: tuple | None = None
    max_rejections: int = 10
    output_dir: str = "runs/default"

    def __post_init__(self):
        for name in ("true_k", "true_d", "design_k", "design_d", "eval_seeds", "learned"):
            setattr(self, name, tuple(getattr(self, name)))
        for name in ("x_min", "x_max"):
            if getattr(self, name) is not None:
                setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        try:
            self.true_bounds()
            self.design_bounds()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        checks = [
            (self.h > 0, "h must be positive"),
            (self.N >= 1, "N must be >= 1"),
            (0 < self.gamma < 1, "gamma must lie in (0, 1)"),
            (self.T_f >= 1, "T_f must be >= 1"),
            (self.episodes_per_iteration >= 1, "episodes_per_iteration must be >= 1"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.exploration >= 0, "exploration must be >= 0"),
            (self.noise_std >= 0, "noise_std must be >= 0"),
            (self.u_min < self.u_max, "u_min must be below u_max"),
            (len(self.eval_seeds) >= 1, "need at least one evaluation seed"),
            (self.schedule_mode in SCHEDULE_MODES, f"schedule_mode must be one of {SCHEDULE_MODES}"),
            (isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer"),
            (self.max_rejections >= 0, "max_rejections must be >= 0"),
            (isinstance(self.theta_init, dict), "theta_init must map slice names to values"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.true_bounds().mass != self.design_bounds().mass:
            raise ConfigError("mass mismatch")

    def true_bounds(self) -> SchedulingBounds:
        return SchedulingBounds.msd(self.true_k, self.true_d, self.mass)

    def design_bounds(self) -> SchedulingBounds:
        return SchedulingBounds.msd(self.design_k, self.design_d, self.mass)

    def output_matrix(self) -> np.ndarray:
        return np.eye(2) if self.full_state else np.array([[1.0, 0.0]])

    def design_model(self) -> PolytopicModel:
        return discretize(msd_vertices(self.design_bounds(), self.output_matrix()), self.h)

    def mhe_config(self) -> MheConfig:
        return MheConfig(self.N, self.gamma)

    def mpc_config(self) -> MpcConfig:
        return MpcConfig(
            self.N, self.gamma, u_min=(self.u_min,), u_max=(self.u_max,),
            x_min=self.x_min, x_max=self.x_max,
        )

    def to_json(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


def initial_theta(cfg: ExperimentConfig, model: PolytopicModel | None = None) -> ThetaVector:
    """MHE slices followed by MPC slices, with ``theta_init`` overrides applied."""
    model = cfg.design_model() if model is None else model
    slices = mhe_theta_slices(model.n_states, model.n_outputs) + mpc_theta_slices(model, cfg.mpc_config())
    theta = ThetaVector.from_slices(slices)
    unknown = set(cfg.learned) - set(theta.names)
    if unknown:
        raise ConfigError(f"unknown learned slices: {sorted(unknown)}")
    for name, value in cfg.theta_init.items():
        if name not in theta:
            raise ConfigError(f"unknown theta slice {name!r}")
        value = np.asarray(value, dtype=float).ravel()
        if value.size != theta[name].size:
            raise ConfigError(f"theta slice {name} needs {theta[name].size} values")
        theta = theta.replace(**{name: value})
    return theta


def load_theta(path, reference: ThetaVector) -> ThetaVector:
    try:
        with open(path) as fh:
            theta = ThetaVector.from_json(json.load(fh))
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(f"malformed theta file {path}: {exc}") from exc
    if theta.layout != reference.layout:
        raise ConfigError(f"theta file {path} does not match the configured layout")
    theta.kinds = dict(reference.kinds)
    return theta


def episode_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


@dataclass
class EpisodeResult:
    rows: list
    transitions: list
    J: float
    x_final: np.ndarray
    solver_failures: int = 0


def run_episode(
    cfg: ExperimentConfig,
    theta: ThetaVector,
    explore: bool,
    seed: int,
    episode: int = 0,
    learned=None,
    x0=None,
    debug_dir: Path | None = None,
    model: PolytopicModel | None = None,
    sensitivities: bool | None = None,
) -> EpisodeResult:
    """One closed-loop rollout on the true plant.

    Sensitivities (and hence transitions usable for learning) are computed
    when ``sensitivities`` is true, by default only for exploratory episodes.
    """
    model = cfg.design_model() if model is None else model
    learned = cfg.learned if learned is None else learned
    sensitivities = explore if sensitivities is None else sensitivities
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, 2) if x0 is None else np.asarray(x0, dtype=float)
    tb = cfg.true_bounds()
    rho = sample_schedule(tb, cfg.schedule_mode, cfg.T_f, seed=int(rng.integers(2**32))).samples
    C = cfg.output_matrix()
    mhe = MovingHorizonEstimator(model, theta, cfg.mhe_config(), sensitivities)
    mpc = ModelPredictiveController(model, theta, cfg.mpc_config())
    y = measure(x, C, cfg.noise_std, rng)
    est = mhe.reset(y)
    rows, transitions = [], []
    J, disc = 0.0, 1.0
    failures = 0
    for k in range(cfg.T_f):
        try:
            sol, source = mpc(est, with_sensitivity=sensitivities)
        except SolverError as exc:
            raise RunAborted(f"MPC failed at step {k} of episode {episode}: {exc}") from exc
        pi = sol.pi
        a = pi
        if explore and cfg.exploration > 0:
            d = rng.uniform(-cfg.exploration, cfg.exploration, pi.shape)
            a = np.clip(pi + d, cfg.u_min, cfg.u_max)
        L = stage_cost(y, a, cfg.Q_L, cfg.R_L)
        J += disc * L
        disc *= cfg.gamma
        valid = bool(sensitivities and est.valid and sol.valid)
        xi = jacobian_xi(sol, est, theta, source, learned) if valid else None
        if debug_dir is not None:
            _dump_prediction(debug_dir, episode, k, sol)
        b_true = true_beta(rho[k], tb)
        x_next = plant_step(x, a, rho[k], cfg.h, cfg.mass)
        y_next = measure(x_next, C, cfg.noise_std, rng)
        est_next = mhe.update(y_next, a)
        rows.append(
            [episode, k, k * cfg.h, float(y[0]), x[0], x[1], est.x_k[0], est.x_k[1]]
            + list(est.beta_k) + list(b_true)
            + [float(a[0]), float(pi[0]), L, int(est.valid and sol.valid)]
        )
        if sensitivities:
            transitions.append(
                Transition(est.x_k.copy(), est.beta_k.copy(), y, a, pi, xi, L, est_next.x_k.copy(), valid)
            )
        x, y, est = x_next, y_next, est_next
    failures = mhe.failures
    return EpisodeResult(rows, transitions, J, x, failures)


def _dump_prediction(debug_dir: Path, episode: int, k: int, sol):
    debug_dir.mkdir(parents=True, exist_ok=True)
    path = debug_dir / f"mpc_e{episode:03d}_k{k:04d}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "x1", "x2", "u"])
        for j, xj in enumerate(sol.x_pred):
            u = sol.u_pred[j, 0] if j < sol.u_pred.shape[0] else ""
            w.writerow([j, repr(float(xj[0])), repr(float(xj[1])), u if u == "" else repr(float(u))])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_episodes(path: Path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def check_rows(rows) -> list[str]:
    """Simplex and input-bound violations in episode rows (empty when clean)."""
    problems = []
    for r in rows:
        beta = np.array(r[8:12], dtype=float)
        u = float(r[16])
        if abs(beta.sum() - 1.0) > SIMPLEX_SUM_TOL or beta.min() < -SIMPLEX_NEG_TOL:
            problems.append(f"episode {r[0]} k={r[1]}: beta {beta} off the simplex")
        if abs(u) > 1.0 + INPUT_BOUND_TOL:
            problems.append(f"episode {r[0]} k={r[1]}: |u|={abs(u)}")
    return problems


def write_config(out: Path, cfg: ExperimentConfig):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)


def write_theta(path: Path, theta: ThetaVector):
    with open(path, "w") as fh:
        json.dump(theta.to_json(), fh, indent=2)


def evaluate(cfg, theta, model=None, episode0=0):
    results = [
        run_episode(cfg, theta, False, s, episode0 + i, model=model)
        for i, s in enumerate(cfg.eval_seeds)
    ]
    return float(np.mean([r.J for r in results])), results


def _probe(cfg, model, transitions):
    """Candidate check: MHE-free MPC solves at a few recorded states."""
    if not transitions:
        return None
    picks = transitions[:: max(1, len(transitions) // 5)][:5]
    mcfg = cfg.mpc_config()

    def probe(theta):
        try:
            for t in picks:
                sched = np.tile(t.beta_hat, (cfg.N + 1, 1))
                policy(model, t.x_hat, sched, theta, mcfg, with_sensitivity=False)
        except (SolverError, ValueError) as exc:
            logger.info("probe rejected candidate: %s", exc)
            return False
        return True

    return probe


TRACE_FIXED = [
    "iteration", "J_eval", "J_explore", "b_theta_inf", "alpha", "rejected",
    "critic_condition", "valid_samples", "x1_final_max",
]


def learn(cfg: ExperimentConfig, out: Path, theta: ThetaVector | None = None) -> dict:
    """RL loop: exploratory batch, two-pass LSTD, projected step, evaluation."""
    out = Path(out)
    model = cfg.design_model()
    theta = initial_theta(cfg, model) if theta is None else theta
    write_config(out, cfg)
    write_theta(out / "theta_initial.json", theta)
    learned = list(cfg.learned)
    n_theta = theta.indices(learned).size
    n_ups = n_upsilon(model.n_states)
    trace_path = out / "learning_trace.csv"
    slice_cols = [f"norm_{n}" for n in theta.names]
    ep_dir = out / "episodes"
    t_start = time.perf_counter()

    J_eval, evals = evaluate(cfg, theta, model)
    write_episodes(ep_dir / "iter_000.csv", [r for e in evals for r in e.rows])
    x1_final = max(abs(e.x_final[0]) for e in evals)
    history = [J_eval]
    with open(trace_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIXED + slice_cols)
        norms = theta.slice_norms()
        w.writerow([_fmt(v) for v in [0, J_eval, "", 0.0, 0.0, 0, "", 0, x1_final]] + [_fmt(norms[n]) for n in theta.names])
        fh.flush()
        rejections = 0
        for it in range(1, cfg.iterations + 1):
            batch_rows, transitions, J_exp = [], [], []
            for e in range(cfg.episodes_per_iteration):
                res = run_episode(
                    cfg, theta, True, episode_seed(cfg.seed, it, e), e, learned, model=model
                )
                batch_rows += res.rows
                transitions += res.transitions
                J_exp.append(res.J)
            rejected, cond, b_inf, alpha_used = False, float("nan"), 0.0, 0.0
            valid = sum(t.valid for t in transitions)
            if learned and cfg.alpha > 0:
                try:
                    critic, acc = fit_critic(transitions, cfg.gamma, n_ups, n_theta)
                    cond = critic.condition
                    b_inf = float(np.abs(acc.b_theta).max(initial=0.0))
                    upd = policy_update(
                        theta, acc.b_theta, cfg.alpha, acc.count, learned,
                        probe=_probe(cfg, model, transitions),
                    )
                    rejected = upd.rejected
                    alpha_used = upd.alpha
                    if not rejected:
                        theta = upd.theta
                except CriticRejected as exc:
                    logger.info("iteration %d: critic rejected (%s)", it, exc)
                    rejected = True
            rejections = rejections + 1 if rejected else 0
            J_eval, evals = evaluate(cfg, theta, model, cfg.episodes_per_iteration)
            x1_final = max(abs(e.x_final[0]) for e in evals)
            history.append(J_eval)
            write_episodes(ep_dir / f"iter_{it:03d}.csv", batch_rows + [r for e in evals for r in e.rows])
            norms = theta.slice_norms()
            w.writerow(
                [_fmt(v) for v in [it, J_eval, float(np.mean(J_exp)), b_inf, alpha_used, int(rejected),
                                   cond, valid, x1_final]]
                + [_fmt(norms[n]) for n in theta.names]
            )
            fh.flush()
            logger.info("iteration %d: J_eval=%.6g rejected=%s (%.0fs)", it, J_eval, rejected,
                        time.perf_counter() - t_start)
            if not np.isfinite(J_eval):
                raise RunAborted(f"non-finite evaluation return at iteration {it}")
            if rejections > cfg.max_rejections:
                write_theta(out / "theta_final.json", theta)
                raise RunAborted(f"{rejections} consecutive rejected updates at iteration {it}")
    write_theta(out / "theta_final.json", theta)
    return {
        "J_eval": history,
        "x1_final_max": x1_final,
        "theta": theta,
        "seconds": time.perf_counter() - t_start,
    }


def simulate(cfg: ExperimentConfig, out: Path, theta: ThetaVector | None = None, debug: bool = False) -> dict:
    out = Path(out)
    model = cfg.design_model()
    theta = initial_theta(cfg, model) if theta is None else theta
    write_config(out, cfg)
    write_theta(out / "theta.json", theta)
    rows, Js, finals = [], [], []
    for i, s in enumerate(cfg.eval_seeds):
        res = run_episode(cfg, theta, False, s, i, model=model,
                          debug_dir=out / "debug" if debug else None)
        rows += res.rows
        Js.append(res.J)
        finals.append(float(res.x_final[0]))
    write_episodes(out / "episodes.csv", rows)
    problems = check_rows(rows)
    if problems:
        raise RunAborted("invariant violation in output: " + problems[0])
    summary = {"J": Js, "J_mean": float(np.mean(Js)), "x1_final": finals}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def bench(cfg: ExperimentConfig, out: Path | None = None, episodes: int = 1) -> dict:
    """Wall-time statistics per MHE and MPC solve (with sensitivities)."""
    from . import mhe as mhe_mod
    from . import mpc as mpc_mod

    model = cfg.design_model()
    theta = initial_theta(cfg, model)
    times = {"mhe": [], "mpc": []}
    orig_est, orig_pol = mhe_mod.estimate, mpc_mod.policy

    def timed(name, fn):
        def wrapper(*a, **kw):
            t = time.perf_counter()
            try:
                return fn(*a, **kw)
            finally:
                times[name].append(time.perf_counter() - t)
        return wrapper

    mhe_mod.estimate = timed("mhe", orig_est)
    mpc_mod.policy = timed("mpc", orig_pol)
    try:
        t0 = time.perf_counter()
        for e in range(episodes):
            run_episode(cfg, theta, True, episode_seed(cfg.seed, 0, e), e, model=model)
        total = time.perf_counter() - t0
    finally:
        mhe_mod.estimate, mpc_mod.policy = orig_est, orig_pol
    stats = {"steps": episodes * cfg.T_f, "total_s": total, "per_step_ms": 1e3 * total / (episodes * cfg.T_f)}
    for name, v in times.items():
        v = np.array(v) * 1e3
        stats[name] = {
            "count": int(v.size), "mean_ms": float(v.mean()), "median_ms": float(np.median(v)),
            "p95_ms": float(np.percentile(v, 95)), "max_ms": float(v.max()),
        }
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.json", "w") as fh:
            json.dump(stats, fh, indent=2)
    return stats
