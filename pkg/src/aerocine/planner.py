"""Camera trajectory optimisation by covariant gradient descent.

The objective over waypoints Φ (n × 3, start fixed) is

    J = J_smooth + λ1·J_shot + λ2·J_obs + λ3·J_occ

where the first two terms are quadratic and share a constant Hessian. That
Hessian, restricted to the free waypoints, is factorised once per call to
:func:`plan` and used as the metric for every step.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError
from .forecast import ActorForecast

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class Field(Protocol):
    def sample(self, points) -> tuple[np.ndarray, np.ndarray]: ...


class FreeSpace:
    """Unbounded free space: every query reads ``distance`` with zero gradient."""

    def __init__(self, distance: float = math.inf):
        self.distance = distance

    def sample(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.full(len(pts), self.distance), np.zeros_like(pts)


# -- data types ----------------------------------------------------------------

@dataclass
class Trajectory:
    waypoints: np.ndarray
    t_f: float
    headings: np.ndarray | None = None

    def __post_init__(self):
        self.waypoints = np.array(self.waypoints, dtype=float).reshape(-1, 3)
        if len(self.waypoints) < 2:
            raise ConfigError("a trajectory needs at least two waypoints")
        if not self.t_f > 0:
            raise ConfigError("t_f must be positive")
        if self.headings is None:
            self.headings = np.zeros(len(self.waypoints))
        self.headings = np.array(self.headings, dtype=float)
        if self.headings.shape != (len(self.waypoints),):
            raise ConfigError("one heading per waypoint")

    @property
    def n(self) -> int:
        return len(self.waypoints)

    @property
    def dt(self) -> float:
        return self.t_f / (self.n - 1)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n) * self.dt

    def copy(self) -> "Trajectory":
        return Trajectory(self.waypoints.copy(), self.t_f, self.headings.copy())

    def with_waypoints(self, waypoints: np.ndarray) -> "Trajectory":
        return Trajectory(waypoints, self.t_f, self.headings.copy())


@dataclass(frozen=True)
class ShotSpec:
    rho: float = 6.0
    phi_rel: float = math.pi / 2
    theta_rel: float = math.radians(20)

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigError("shot distance rho must be positive")
        if not 0 <= self.phi_rel <= 2 * math.pi:
            raise ConfigError("phi_rel must lie in [0, 2pi]")
        if not -math.pi <= self.theta_rel <= math.pi:
            raise ConfigError("theta_rel must lie in [-pi, pi]")


@dataclass(frozen=True)
class PlannerConfig:
    lambda1: float = 10.0
    lambda2: float = 100.0
    lambda3: float = 50.0
    alpha: tuple[float, ...] = (1.0, 1.0, 1.0)
    d_max: int = 3
    epsilon_obs: float = 2.5
    eta: float = 1.0
    max_iterations: int = 10
    grad_tolerance: float = 1e-3
    n_waypoints: int = 51
    horizon: float = 10.0
    occlusion_samples: int = 16
    line_search: bool = True
    max_backtracks: int = 12

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if min(self.lambda1, self.lambda2, self.lambda3) < 0 or min(self.alpha) < 0:
            raise ConfigError("weights must be non-negative")
        if self.d_max < 1 or len(self.alpha) != self.d_max:
            raise ConfigError("alpha needs one weight per difference order up to d_max")
        if not self.epsilon_obs > 0:
            raise ConfigError("epsilon_obs must be positive")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.n_waypoints < self.d_max + 1:
            raise ConfigError(f"need at least {self.d_max + 1} waypoints")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if self.occlusion_samples < 2:
            raise ConfigError("occlusion_samples must be >= 2")
        if self.max_backtracks < 0:
            raise ConfigError("max_backtracks must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "PlannerConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown planner keys: {sorted(extra)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "PlannerConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"planner config {path} not found")
        try:
            if path.suffix == ".json":
                data = json.loads(path.read_text())
            else:
                data = tomllib.loads(path.read_text())
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data.get("planner", data))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = list(self.alpha)
        return d


@dataclass(frozen=True)
class QuadraticForm:
    """f(X) = Tr(XᵀAX + 2Xᵀb) + c over the free waypoints."""

    A: np.ndarray
    b: np.ndarray
    c: float

    def value(self, X: np.ndarray) -> float:
        return float(np.sum(X * (self.A @ X)) + 2 * np.sum(X * self.b) + self.c)

    def minimizer(self) -> np.ndarray:
        return -np.linalg.solve(self.A, self.b)


# -- quadratic terms -----------------------------------------------------------

def difference_operator(n: int, order: int, dt: float) -> np.ndarray:
    """Order-``order`` forward difference over n samples, scaled by dt^-order."""
    D = np.eye(n)
    for _ in range(order):
        D = D[1:] - D[:-1]
    return D / dt**order


@lru_cache(maxsize=32)
def _smooth_matrix(n: int, dt: float, alpha: tuple[float, ...]) -> np.ndarray:
    A = np.zeros((n, n))
    for d, a in enumerate(alpha, start=1):
        if a:
            D = difference_operator(n, d, dt)
            A += a * (D.T @ D)
    A.setflags(write=False)
    return A


def smoothness_matrix(n: int, dt: float, cfg: PlannerConfig) -> np.ndarray:
    if n < cfg.d_max + 1:
        raise ConfigError(f"smoothness needs n >= {cfg.d_max + 1} waypoints, got {n}")
    return _smooth_matrix(n, float(dt), cfg.alpha)


def smoothness_form(traj: Trajectory, cfg: PlannerConfig) -> QuadraticForm:
    """Smoothness cost as a quadratic in the free waypoints, start eliminated."""
    A = smoothness_matrix(traj.n, traj.dt, cfg)
    s = 1.0 / (2 * (traj.n - 1))
    x0 = traj.waypoints[:1]
    return QuadraticForm(
        s * A[1:, 1:], s * A[1:, :1] @ x0, float(s * np.sum(x0 * (A[:1, :1] @ x0))),
    )


def smoothness_cost(traj: Trajectory, cfg: PlannerConfig) -> tuple[float, np.ndarray]:
    A = smoothness_matrix(traj.n, traj.dt, cfg)
    X = traj.waypoints
    AX = A @ X
    cost = float(np.sum(X * AX)) / (2 * (traj.n - 1))
    grad = AX / (traj.n - 1)
    grad[0] = 0.0
    return cost, grad


def shot_offsets(headings, shot: ShotSpec) -> np.ndarray:
    az = np.asarray(headings, dtype=float) + shot.phi_rel
    ct = math.cos(shot.theta_rel)
    return shot.rho * np.column_stack(
        [np.cos(az) * ct, np.sin(az) * ct, np.full(az.shape, math.sin(shot.theta_rel))]
    )


def heading_towards(waypoints: np.ndarray, targets: np.ndarray, fallback=None) -> np.ndarray:
    """Planar bearing from each waypoint to its target; ``fallback`` where they coincide."""
    d = np.asarray(targets, dtype=float) - np.asarray(waypoints, dtype=float)
    h = np.arctan2(d[:, 1], d[:, 0])
    near = np.linalg.norm(d, axis=1) <= 1e-6
    if near.any():
        h[near] = 0.0 if fallback is None else np.asarray(fallback, dtype=float)[near]
    return h


def ideal_shot_trajectory(actor: ActorForecast, shot: ShotSpec) -> Trajectory:
    pos = actor.positions + shot_offsets(actor.headings, shot)
    t_f = float(actor.times[-1] - actor.times[0])
    return Trajectory(pos, t_f, heading_towards(pos, actor.positions))


def shot_quality_cost(traj: Trajectory, shot_traj: Trajectory) -> tuple[float, np.ndarray]:
    if traj.n != shot_traj.n:
        raise ValueError(f"waypoint count mismatch: {traj.n} vs {shot_traj.n}")
    diff = traj.waypoints - shot_traj.waypoints
    cost = float(np.sum(diff * diff)) / (2 * (traj.n - 1))
    grad = diff / (traj.n - 1)
    grad[0] = 0.0
    return cost, grad


def shot_form(traj: Trajectory, shot_traj: Trajectory) -> QuadraticForm:
    s = 1.0 / (2 * (traj.n - 1))
    x0 = traj.waypoints[0] - shot_traj.waypoints[0]
    ref = shot_traj.waypoints[1:]
    return QuadraticForm(s * np.eye(traj.n - 1), -s * ref, float(s * (np.sum(ref * ref) + x0 @ x0)))


# -- field-dependent terms -----------------------------------------------------

def obstacle_potential(d, epsilon_obs: float):
    """Piecewise clearance penalty; linear inside obstacles, quadratic ramp up to ε."""
    d = np.asarray(d, dtype=float)
    out = np.where(d < 0, -d + 0.5 * epsilon_obs, 0.0)
    ramp = (d >= 0) & (d <= epsilon_obs)
    out = np.where(ramp, (d - epsilon_obs) ** 2 / (2 * epsilon_obs), out)
    return out if out.ndim else float(out)


def obstacle_potential_slope(d, epsilon_obs: float) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    out = np.where(d < 0, -1.0, 0.0)
    ramp = (d >= 0) & (d <= epsilon_obs)
    return np.where(ramp, (d - epsilon_obs) / epsilon_obs, out)


def _segments(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    seg = X[1:] - X[:-1]
    length = np.linalg.norm(seg, axis=1)
    unit = np.zeros_like(seg)
    nz = length > 0
    unit[nz] = seg[nz] / length[nz, None]
    return length, unit


def safety_cost(traj: Trajectory, sdf: Field, epsilon_obs: float = 2.5) -> tuple[float, np.ndarray]:
    """Σ_i c(Φ_i)·‖Φ_{i+1} − Φ_i‖ and its gradient."""
    X = traj.waypoints
    d, gd = sdf.sample(X[:-1])
    c = obstacle_potential(d, epsilon_obs)
    dc = obstacle_potential_slope(d, epsilon_obs)
    length, unit = _segments(X)
    cost = float(np.sum(c * length))
    grad = np.zeros_like(X)
    grad[:-1] += (dc * length)[:, None] * gd
    grad[:-1] -= c[:, None] * unit
    grad[1:] += c[:, None] * unit
    grad[0] = 0.0
    return cost, grad


def _trapezoid(K: int) -> tuple[np.ndarray, np.ndarray]:
    tau = np.linspace(0.0, 1.0, K)
    w = np.full(K, 1.0 / (K - 1))
    w[0] = w[-1] = 0.5 / (K - 1)
    return tau, w


def occlusion_cost(traj: Trajectory, actor: ActorForecast, sdf: Field,
                   epsilon_obs: float = 2.5, samples: int = 16) -> tuple[float, np.ndarray]:
    """Potential integrated over the drone-actor segments, weighted by drone arc length."""
    Q = traj.waypoints
    A = actor.positions
    if len(A) != len(Q):
        raise ValueError(f"sample count mismatch: {len(Q)} waypoints vs {len(A)} actor samples")
    tau, w = _trapezoid(samples)
    m = len(Q) - 1
    q, a = Q[:-1], A[:-1]
    pts = tau[None, :, None] * q[:, None, :] + (1 - tau)[None, :, None] * a[:, None, :]
    d, gd = sdf.sample(pts.reshape(-1, 3))
    d = d.reshape(m, samples)
    gd = gd.reshape(m, samples, 3)
    c = obstacle_potential(d, epsilon_obs)
    dc = obstacle_potential_slope(d, epsilon_obs)
    S = c @ w
    rel = q - a
    B = np.linalg.norm(rel, axis=1)
    rel_unit = np.zeros_like(rel)
    nz = B > 0
    rel_unit[nz] = rel[nz] / B[nz, None]
    L, unit = _segments(Q)

    cost = float(np.sum(L * B * S))
    dS = np.einsum("k,mk,mkj->mj", w * tau, dc, gd)
    grad = np.zeros_like(Q)
    grad[:-1] += (L * B)[:, None] * dS
    grad[:-1] += (L * S)[:, None] * rel_unit
    grad[:-1] -= (B * S)[:, None] * unit
    grad[1:] += (B * S)[:, None] * unit
    grad[0] = 0.0
    return cost, grad


# -- objective and optimiser ---------------------------------------------------

@dataclass
class CostBreakdown:
    total: float
    smooth: float
    shot: float
    obs: float
    occ: float

    def as_dict(self) -> dict:
        return {"J": self.total, "J_smooth": self.smooth, "J_shot": self.shot,
                "J_obs": self.obs, "J_occ": self.occ}


def total_cost(traj: Trajectory, actor: ActorForecast, shot: ShotSpec | Trajectory, sdf: Field,
               cfg: PlannerConfig) -> tuple[float, np.ndarray]:
    cost, grad, _ = _evaluate(traj, actor, _shot_traj(actor, shot), sdf, cfg)
    return cost, grad


def cost_breakdown(traj, actor, shot, sdf, cfg) -> CostBreakdown:
    return _evaluate(traj, actor, _shot_traj(actor, shot), sdf, cfg)[2]


def _shot_traj(actor, shot) -> Trajectory:
    return shot if isinstance(shot, Trajectory) else ideal_shot_trajectory(actor, shot)


def _evaluate(traj, actor, shot_traj, sdf, cfg):
    js, gs = smoothness_cost(traj, cfg)
    jq, gq = shot_quality_cost(traj, shot_traj)
    total = js + cfg.lambda1 * jq
    grad = gs + cfg.lambda1 * gq
    jo = jc = 0.0
    if cfg.lambda2:
        jo, go = safety_cost(traj, sdf, cfg.epsilon_obs)
        total += cfg.lambda2 * jo
        grad += cfg.lambda2 * go
    if cfg.lambda3:
        jc, gc = occlusion_cost(traj, actor, sdf, cfg.epsilon_obs, cfg.occlusion_samples)
        total += cfg.lambda3 * jc
        grad += cfg.lambda3 * gc
    grad[0] = 0.0
    return total, grad, CostBreakdown(total, js, jq, jo, jc)


def preconditioner(n: int, dt: float, cfg: PlannerConfig) -> np.ndarray:
    """(A_smooth + λ1·A_shot) on the free waypoints, in the scaling of the cost."""
    A = smoothness_matrix(n, dt, cfg)[1:, 1:] + cfg.lambda1 * np.eye(n - 1)
    return A / (n - 1)


@dataclass
class PlanDiagnostics:
    iterations: int = 0
    costs: CostBreakdown | None = None
    initial_cost: float = math.nan
    grad_norm: float = math.nan
    converged: bool = False
    error: str | None = None
    wall_ms: float = 0.0
    history: list[float] = field(default_factory=list)

    def record(self, t: float | None = None) -> dict:
        out = {"t": t, "iters": self.iterations}
        out.update(self.costs.as_dict() if self.costs else {})
        out.update({"grad_norm": self.grad_norm, "converged": self.converged,
                    "error": self.error, "wall_ms": self.wall_ms})
        return out


def plan(initial: Trajectory, actor: ActorForecast, shot: ShotSpec, sdf: Field,
         cfg: PlannerConfig) -> tuple[Trajectory, PlanDiagnostics]:
    """Covariant gradient descent from ``initial``; the start waypoint never moves.

    Each iteration takes the metric step scaled by 1/η. With ``line_search``
    the step is halved until the objective does not increase, so the
    non-quadratic terms cannot make the iteration diverge; later trials start
    from twice the last accepted scale. A full step that already decreases J
    is taken unchanged.
    """
    t0 = time.perf_counter()
    if len(actor) != initial.n:
        raise ValueError(f"actor forecast has {len(actor)} samples, trajectory {initial.n}")
    shot_traj = _shot_traj(actor, shot)
    factor = cho_factor(preconditioner(initial.n, initial.dt, cfg))
    diag = PlanDiagnostics()
    traj = initial.with_waypoints(initial.waypoints)

    def finite(c, g):
        return math.isfinite(c) and bool(np.all(np.isfinite(g)))

    def metric_step(g):
        step = cho_solve(factor, g[1:])
        return step, float(np.max(np.linalg.norm(step, axis=1)))

    cost, grad, parts = _evaluate(traj, actor, shot_traj, sdf, cfg)
    if not finite(cost, grad):
        diag.error = "non-finite cost or gradient at the initial trajectory"
    else:
        diag.initial_cost = cost
        diag.costs = parts
        diag.history.append(cost)
        step, diag.grad_norm = metric_step(grad)
        full = 1.0 / cfg.eta
        scale = full
        while diag.iterations < cfg.max_iterations:
            if diag.grad_norm < cfg.grad_tolerance:
                break
            accepted = None
            for _ in range(cfg.max_backtracks + 1 if cfg.line_search else 1):
                X = traj.waypoints.copy()
                X[1:] -= scale * step
                trial = traj.with_waypoints(X)
                c2, g2, p2 = _evaluate(trial, actor, shot_traj, sdf, cfg)
                if not finite(c2, g2):
                    diag.error = f"non-finite cost or gradient at iteration {diag.iterations + 1}"
                    break
                if not cfg.line_search or c2 <= cost:
                    accepted = (trial, c2, g2, p2)
                    break
                scale *= 0.5
            if accepted is None:
                break
            # the next trial starts from twice the accepted scale, never beyond 1/η
            scale = min(full, 2.0 * scale)
            traj, cost, grad, parts = accepted
            diag.iterations += 1
            diag.costs = parts
            diag.history.append(cost)
            step, diag.grad_norm = metric_step(grad)
        diag.converged = diag.grad_norm < cfg.grad_tolerance

    out = traj.with_waypoints(traj.waypoints)
    out.waypoints[0] = initial.waypoints[0]
    out.headings = heading_towards(out.waypoints, actor.positions, initial.headings)
    diag.wall_ms = (time.perf_counter() - t0) * 1e3
    return out, diag


def straight_initialization(start, actor: ActorForecast, shot: ShotSpec, t_f: float) -> Trajectory:
    """Blend from ``start`` onto the ideal shot over the first quarter of the horizon."""
    ideal = ideal_shot_trajectory(actor, shot).waypoints
    n = len(ideal)
    s = np.clip(np.arange(n) / max(1, (n - 1) // 4), 0.0, 1.0)[:, None]
    X = (1 - s) * np.asarray(start, dtype=float) + s * ideal
    X[0] = start
    return Trajectory(X, t_f, heading_towards(X, actor.positions))


def shift_trajectory(traj: Trajectory, shift: float, start) -> Trajectory:
    """Warm start for the next cycle: advance by ``shift`` seconds, extrapolating the tail."""
    t = traj.times + shift
    X = np.empty_like(traj.waypoints)
    last_v = (traj.waypoints[-1] - traj.waypoints[-2]) / traj.dt
    for j in range(3):
        X[:, j] = np.interp(t, traj.times, traj.waypoints[:, j])
    beyond = t > traj.times[-1]
    X[beyond] = traj.waypoints[-1] + (t[beyond] - traj.times[-1])[:, None] * last_v
    X[0] = start
    return Trajectory(X, traj.t_f, np.interp(t, traj.times, np.unwrap(traj.headings)))


__all__ = [
    "FreeSpace", "PlanDiagnostics", "PlannerConfig", "QuadraticForm", "ShotSpec", "Trajectory",
    "ideal_shot_trajectory", "obstacle_potential", "occlusion_cost", "plan", "safety_cost",
    "shot_quality_cost", "smoothness_cost", "total_cost",
]
