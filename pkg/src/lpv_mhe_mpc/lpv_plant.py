"""Polytopic LPV models, the mass-spring-damper plant and scheduling signals.

Vertices of a box of scheduling parameters are ordered lexicographically
over (spring, damper) corners::

    1: (k_lo, d_lo)   2: (k_lo, d_hi)   3: (k_hi, d_lo)   4: (k_hi, d_hi)

so that convex weights keep a stable meaning across estimator, controller
and logs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

SIMPLEX_SUM_TOL = 1e-8
SIMPLEX_NEG_TOL = 1e-9

TimeDomain = Literal["continuous", "discrete"]
SCHEDULE_MODES = ("constant-per-episode", "piecewise-constant", "sinusoidal-drift")


@dataclass(frozen=True)
class LtiVertex:
    """One LTI corner model ``x' = A x + B u, y = C x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    time_domain: TimeDomain = "continuous"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        if C.shape[1] != n:
            raise ValueError(f"C has {C.shape[1]} columns, expected {n}")
        if self.time_domain not in ("continuous", "discrete"):
            raise ValueError(f"unknown time domain {self.time_domain!r}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)


@dataclass(frozen=True)
class PolytopicModel:
    """Convex hull of ``len(vertices)`` LTI models sharing dimensions."""

    vertices: tuple[LtiVertex, ...]
    n_scheduling: int | None = None
    A: np.ndarray = field(init=False, repr=False)
    B: np.ndarray = field(init=False, repr=False)
    C: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vertices = tuple(self.vertices)
        if len(vertices) < 1:
            raise ValueError("a polytopic model needs at least one vertex")
        first = vertices[0]
        for v in vertices[1:]:
            if (v.A.shape, v.B.shape, v.C.shape) != (first.A.shape, first.B.shape, first.C.shape):
                raise ValueError("all vertices must share dimensions")
            if v.time_domain != first.time_domain:
                raise ValueError("all vertices must share the time domain")
        if self.n_scheduling is not None and len(vertices) != 2 ** self.n_scheduling:
            raise ValueError(
                f"{len(vertices)} vertices do not match 2**{self.n_scheduling}"
            )
        object.__setattr__(self, "vertices", vertices)
        # stacked copies for vectorised combination
        object.__setattr__(self, "A", np.stack([v.A for v in vertices]))
        object.__setattr__(self, "B", np.stack([v.B for v in vertices]))
        object.__setattr__(self, "C", np.stack([v.C for v in vertices]))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_states(self) -> int:
        return self.A.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[2]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[1]

    @property
    def time_domain(self) -> TimeDomain:
        return self.vertices[0].time_domain

    def with_output(self, C) -> "PolytopicModel":
        """Copy of the model with the same output matrix on every vertex."""
        return PolytopicModel(
            tuple(LtiVertex(v.A, v.B, C, v.time_domain) for v in self.vertices),
            self.n_scheduling,
        )


@dataclass(frozen=True)
class SchedulingBounds:
    """Box bounds on the scheduling parameters plus the (fixed) mass.

    For the mass-spring-damper, parameter 0 is the spring constant ``k``
    [N/m] and parameter 1 the damping ``d`` [N s/m].
    """

    lower: np.ndarray
    upper: np.ndarray
    mass: float = 1.0

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape:
            raise ValueError("lower and upper bounds differ in shape")
        if np.any(lower > upper):
            raise ValueError(f"inverted bounds: lower={lower}, upper={upper}")
        if not self.mass > 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "mass", float(self.mass))

    @classmethod
    def msd(cls, k=(1.0, 2.0), d=(0.0, 0.5), mass=1.0) -> "SchedulingBounds":
        return cls(np.array([k[0], d[0]]), np.array([k[1], d[1]]), mass)

    @property
    def n_params(self) -> int:
        return self.lower.size

    def contains(self, rho, tol: float = 0.0) -> bool:
        rho = np.asarray(rho, dtype=float)
        return bool(np.all(rho >= self.lower - tol) and np.all(rho <= self.upper + tol))


@dataclass(frozen=True)
class ScheduleTrajectory:
    mode: str
    samples: np.ndarray  # (horizon, p)
    seed: int | None


def check_beta(beta, n_vertices: int | None = None) -> np.ndarray:
    """Validate a convex-combination vector and return it as an array."""
    beta = np.asarray(beta, dtype=float).ravel()
    if n_vertices is not None and beta.size != n_vertices:
        raise ValueError(f"beta has length {beta.size}, expected {n_vertices}")
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta contains non-finite entries")
    if abs(beta.sum() - 1.0) > SIMPLEX_SUM_TOL or beta.min() < -SIMPLEX_NEG_TOL:
        raise ValueError(f"beta {beta} is not on the simplex")
    return beta


def uniform_beta(n_vertices: int) -> np.ndarray:
    return np.full(n_vertices, 1.0 / n_vertices)


def msd_matrices(k: float, d: float, mass: float):
    A = np.array([[0.0, 1.0], [-k / mass, -d / mass]])
    B = np.array([[0.0], [1.0 / mass]])
    return A, B


def msd_vertices(bounds: SchedulingBounds, C=None) -> PolytopicModel:
    """Four continuous-time corner models of the mass-spring-damper.

    ``C`` defaults to position measurement ``[1, 0]``; pass ``np.eye(2)``
    for the full-state test mode.
    """
    if bounds.n_params != 2:
        raise ValueError("the mass-spring-damper is scheduled by (k, d)")
    C = np.array([[1.0, 0.0]]) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    (k_lo, d_lo), (k_hi, d_hi) = bounds.lower, bounds.upper
    vertices = []
    for k in (k_lo, k_hi):
        for d in (d_lo, d_hi):
            A, B = msd_matrices(k, d, bounds.mass)
            vertices.append(LtiVertex(A, B, C, "continuous"))
    return PolytopicModel(tuple(vertices), n_scheduling=2)


def combine(model: PolytopicModel, beta):
    """Convex combination ``(sum b_i A_i, sum b_i B_i, sum b_i C_i)``."""
    beta = check_beta(beta, model.n_vertices)
    return (
        np.tensordot(beta, model.A, axes=1),
        np.tensordot(beta, model.B, axes=1),
        np.tensordot(beta, model.C, axes=1),
    )


def discretize(model: PolytopicModel, h: float) -> PolytopicModel:
    """Forward-Euler discretisation of every vertex.

    Euler is affine in (A, B), so it commutes with the convex combination;
    a zero-order hold would not.
    """
    if not h > 0:
        raise ValueError(f"sample time must be positive, got {h}")
    if model.time_domain != "continuous":
        raise ValueError("model is already discrete")
    n = model.n_states
    vertices = tuple(
        LtiVertex(np.eye(n) + h * v.A, h * v.B, v.C, "discrete") for v in model.vertices
    )
    return PolytopicModel(vertices, model.n_scheduling)


def plant_step(x, u, rho, h: float, mass: float = 1.0) -> np.ndarray:
    """One RK4 step of the true mass-spring-damper at scheduling ``rho = (k, d)``."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    rho = np.asarray(rho, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u)) and np.all(np.isfinite(rho))):
        raise ValueError("non-finite plant input")
    if h < 0:
        raise ValueError(f"negative step {h}")
    A, B = msd_matrices(rho[0], rho[1], mass)
    Bu = B @ u

    def f(z):
        return A @ z + Bu

    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def sample_schedule(
    bounds: SchedulingBounds,
    mode: str = "constant-per-episode",
    horizon: int = 1,
    seed: int | None = None,
    segment: int = 50,
    period: int = 400,
) -> ScheduleTrajectory:
    """Draw a scheduling trajectory inside ``bounds``.

    ``segment`` is the hold length of the piecewise-constant mode and
    ``period`` the drift period (in steps) of the sinusoidal mode.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if mode not in SCHEDULE_MODES:
        raise ValueError(f"unknown schedule mode {mode!r}")
    rng = np.random.default_rng(seed)
    lo, hi = bounds.lower, bounds.upper
    p = bounds.n_params
    if mode == "constant-per-episode":
        rho = rng.uniform(lo, hi)
        samples = np.tile(rho, (horizon, 1))
    elif mode == "piecewise-constant":
        n_seg = -(-horizon // segment)
        values = rng.uniform(lo, hi, size=(n_seg, p))
        samples = np.repeat(values, segment, axis=0)[:horizon]
    else:
        phase = rng.uniform(0.0, 2 * np.pi, size=p)
        t = np.arange(horizon)[:, None]
        s = 0.5 * (1.0 + np.sin(2 * np.pi * t / period + phase))
        samples = lo + (hi - lo) * s
    samples = np.clip(samples, lo, hi)
    return ScheduleTrajectory(mode, samples, seed)


def true_beta(rho, bounds: SchedulingBounds) -> np.ndarray:
    """Bilinear box coordinates of ``rho`` in the vertex order of :func:`msd_vertices`.

    A zero-width dimension puts all weight on its lower corner.
    """
    rho = np.asarray(rho, dtype=float)
    if not bounds.contains(rho, tol=1e-12):
        raise ValueError(f"rho={rho} outside the scheduling box")
    width = bounds.upper - bounds.lower
    frac = np.where(width > 0, (rho - bounds.lower) / np.where(width > 0, width, 1.0), 0.0)
    s, t = np.clip(frac, 0.0, 1.0)
    return np.array([(1 - s) * (1 - t), (1 - s) * t, s * (1 - t), s * t])


def measure(x, C, noise_std: float = 0.0, rng: np.random.Generator | None = None):
    y = np.atleast_2d(C) @ np.asarray(x, dtype=float)
    if noise_std > 0:
        rng = np.random.default_rng() if rng is None else rng
        y = y + noise_std * rng.standard_normal(y.shape)
    return y
