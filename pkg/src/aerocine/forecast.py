"""Actor localisation and motion forecasting.

Pixel observations are back-projected onto the ground plane, filtered with a
Kalman filter and rolled forward over the planning horizon. People use a
constant-velocity model in the ground plane; vehicles use constant turn rate
and velocity (CTRV) with heading in the state.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, NoIntersectionError

PERSON = "person"
VEHICLE = "vehicle"


def wrap_angle(a: float) -> float:
    """Map an angle to [-pi, pi)."""
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class ActorObservation:
    timestamp: float
    world_position: tuple[float, float, float]
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "world_position", tuple(float(v) for v in self.world_position))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (*self.world_position, self.heading, self.timestamp))


# -- camera ------------------------------------------------------------------

@dataclass
class CameraModel:
    """Pinhole camera. ``rotation`` maps camera axes (x right, y down, z forward) to world."""

    position: np.ndarray
    rotation: np.ndarray
    fx: float = 800.0
    fy: float = 800.0
    cx: float = 640.0
    cy: float = 360.0
    width: int = 1280
    height: int = 720

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ConfigError("principal point must lie inside the image")

    @classmethod
    def looking(cls, position, yaw: float, pitch: float, **intrinsics) -> "CameraModel":
        """Camera at ``position`` facing azimuth ``yaw``, tilted down by ``pitch`` (radians)."""
        cp, sp = math.cos(pitch), math.sin(pitch)
        cyaw, syaw = math.cos(yaw), math.sin(yaw)
        forward = np.array([cp * cyaw, cp * syaw, -sp])
        right = np.array([syaw, -cyaw, 0.0])
        down = np.cross(forward, right)
        return cls(position, np.column_stack([right, down, forward]), **intrinsics)

    @classmethod
    def aimed_at(cls, position, target, **intrinsics) -> "CameraModel":
        d = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
        yaw = math.atan2(d[1], d[0])
        pitch = math.atan2(-d[2], math.hypot(d[0], d[1]))
        return cls.looking(position, yaw, pitch, **intrinsics)

    def project(self, point) -> np.ndarray:
        """Forward pinhole projection of a world point to pixel coordinates."""
        pc = self.rotation.T @ (np.asarray(point, dtype=float) - self.position)
        if pc[2] <= 0:
            raise ValueError("point is behind the camera")
        return np.array([self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy])


def project_pixel_to_ground(camera: CameraModel, pixel, ground_z: float) -> np.ndarray:
    """Intersect the back-projected ray through ``pixel`` with the plane z = ``ground_z``."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u <= camera.width and 0 <= v <= camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside the image")
    ray = camera.rotation @ np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    if ray[2] == 0:
        raise NoIntersectionError("ray is parallel to the ground plane")
    t = (ground_z - camera.position[2]) / ray[2]
    if t <= 0:
        raise NoIntersectionError("ray points away from the ground plane")
    out = camera.position + t * ray
    out[2] = ground_z
    return out


# -- filtering ---------------------------------------------------------------

@dataclass
class ActorFilter:
    model_kind: str
    state: np.ndarray
    covariance: np.ndarray
    process_noise: float
    measurement_noise: float
    heading_noise: float = 0.2
    vertical_noise: float = 0.05
    last_heading: float = 0.0
    last_rejected: bool = False
    time: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return self.state[:3].copy()

    @property
    def velocity(self) -> np.ndarray:
        if self.model_kind == PERSON:
            return np.array([self.state[3], self.state[4], 0.0])
        v, psi = self.state[3], self.state[4]
        return np.array([v * math.cos(psi), v * math.sin(psi), 0.0])


_DEFAULT_ACCEL = {PERSON: 1.0, VEHICLE: 0.5}


def make_filter(kind: str, first: ActorObservation, *, process_noise: float | None = None,
                measurement_noise: float = 0.5, initial_speed_sigma: float | None = None) -> ActorFilter:
    """Filter initialised at an observation with zero velocity."""
    kind = normalize_kind(kind)
    q = _DEFAULT_ACCEL[kind] if process_noise is None else process_noise
    r2 = max(measurement_noise, 1e-3) ** 2
    p = np.asarray(first.world_position, dtype=float)
    if kind == PERSON:
        sv = 3.0 if initial_speed_sigma is None else initial_speed_sigma
        state = np.array([p[0], p[1], p[2], 0.0, 0.0])
        cov = np.diag([r2, r2, r2, sv**2, sv**2])
    else:
        sv = 5.0 if initial_speed_sigma is None else initial_speed_sigma
        state = np.array([p[0], p[1], p[2], 0.0, first.heading, 0.0])
        cov = np.diag([r2, r2, r2, sv**2, 0.2**2, 0.5**2])
    return ActorFilter(kind, state, cov, q, measurement_noise,
                       last_heading=first.heading, time=first.timestamp)


def normalize_kind(kind: str) -> str:
    kind = kind.lower()
    if kind in (PERSON, "people", "pedestrian", "runner"):
        return PERSON
    if kind in (VEHICLE, "car", "bicycle", "bike", "motorcycle"):
        return VEHICLE
    raise ConfigError(f"unknown actor model {kind!r}")


def _cv_transition(dt: float, q: float, qz: float) -> tuple[np.ndarray, np.ndarray]:
    F = np.eye(5)
    F[0, 3] = F[1, 4] = dt
    Q = np.zeros((5, 5))
    # continuous white-noise acceleration, integrated exactly over dt
    a, b, c = dt**3 / 3, dt**2 / 2, dt
    for i, j in ((0, 3), (1, 4)):
        Q[i, i] = a * q**2
        Q[i, j] = Q[j, i] = b * q**2
        Q[j, j] = c * q**2
    Q[2, 2] = qz**2 * dt
    return F, Q


def _ctrv_predict(x: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Propagated CTRV state and its Jacobian."""
    px, py, pz, v, psi, w = x
    J = np.eye(6)
    out = x.copy()
    s0, c0 = math.sin(psi), math.cos(psi)
    if abs(w) > 1e-6:
        psi1 = psi + w * dt
        s1, c1 = math.sin(psi1), math.cos(psi1)
        out[0] = px + v / w * (s1 - s0)
        out[1] = py + v / w * (c0 - c1)
        out[4] = psi1
        J[0, 3] = (s1 - s0) / w
        J[0, 4] = v / w * (c1 - c0)
        J[0, 5] = v * dt * c1 / w - v / w**2 * (s1 - s0)
        J[1, 3] = (c0 - c1) / w
        J[1, 4] = v / w * (s1 - s0)
        J[1, 5] = v * dt * s1 / w - v / w**2 * (c0 - c1)
    else:
        out[0] = px + v * c0 * dt
        out[1] = py + v * s0 * dt
        out[4] = psi + w * dt
        J[0, 3] = c0 * dt
        J[0, 4] = -v * s0 * dt
        J[0, 5] = -0.5 * v * s0 * dt**2
        J[1, 3] = s0 * dt
        J[1, 4] = v * c0 * dt
        J[1, 5] = 0.5 * v * c0 * dt**2
    J[4, 5] = dt
    return out, J


def _ctrv_noise(x: np.ndarray, dt: float, q: float, qz: float) -> np.ndarray:
    psi = x[4]
    G = np.array([
        [0.5 * dt**2 * math.cos(psi), 0.0],
        [0.5 * dt**2 * math.sin(psi), 0.0],
        [0.0, 0.0],
        [dt, 0.0],
        [0.0, 0.5 * dt**2],
        [0.0, dt],
    ])
    yaw_accel = 0.5  # rad/s^2
    Q = G @ np.diag([q**2, yaw_accel**2]) @ G.T
    Q[2, 2] += qz**2 * dt
    return Q


def _predict(f: ActorFilter, dt: float) -> tuple[np.ndarray, np.ndarray]:
    if f.model_kind == PERSON:
        F, Q = _cv_transition(dt, f.process_noise, f.vertical_noise)
        return F @ f.state, F @ f.covariance @ F.T + Q
    x, J = _ctrv_predict(f.state, dt)
    x[4] = wrap_angle(x[4])
    return x, J @ f.covariance @ J.T + _ctrv_noise(f.state, dt, f.process_noise, f.vertical_noise)


def kf_step(filt: ActorFilter, dt: float, observation: ActorObservation | None = None) -> ActorFilter:
    """One predict (and optional position update) step; returns a new filter.

    Non-finite observations are dropped and the step is predict-only, with
    ``last_rejected`` set on the result.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x, P = _predict(filt, dt)
    rejected = observation is not None and not observation.is_finite()
    last_heading = filt.last_heading
    if observation is not None and not rejected:
        z = np.asarray(observation.world_position, dtype=float)
        r2 = filt.measurement_noise**2
        n = x.shape[0]
        if filt.model_kind == PERSON:
            H = np.zeros((3, n))
            H[0, 0] = H[1, 1] = H[2, 2] = 1.0
            R = np.eye(3) * r2
            y = z - H @ x
        else:
            H = np.zeros((4, n))
            H[0, 0] = H[1, 1] = H[2, 2] = 1.0
            H[3, 4] = 1.0
            R = np.diag([r2, r2, r2, filt.heading_noise**2])
            y = np.append(z - x[:3], wrap_angle(observation.heading - x[4]))
        S = H @ P @ H.T + R
        K = np.linalg.solve(S.T, (P @ H.T).T).T
        x = x + K @ y
        I_KH = np.eye(n) - K @ H
        P = I_KH @ P @ I_KH.T + K @ R @ K.T
        if filt.model_kind == VEHICLE:
            x[4] = wrap_angle(x[4])
        last_heading = observation.heading
    P = 0.5 * (P + P.T)
    return replace(filt, state=x, covariance=P, last_heading=last_heading,
                   last_rejected=rejected, time=filt.time + dt)


@dataclass
class ActorForecast:
    """Time-stamped actor samples (x, y, z, heading) starting at the current estimate."""

    times: np.ndarray
    positions: np.ndarray
    headings: np.ndarray = field(default=None)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if self.headings is None:
            self.headings = np.zeros(len(self.times))
        self.headings = np.asarray(self.headings, dtype=float)
        if not (len(self.times) == len(self.positions) == len(self.headings)):
            raise ValueError("forecast arrays differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("forecast timestamps must increase strictly")

    def __len__(self) -> int:
        return len(self.times)

    def lifted(self, dz: float) -> "ActorForecast":
        return ActorForecast(self.times, self.positions + np.array([0.0, 0.0, dz]), self.headings)


def forecast(filt: ActorFilter, horizon: float, dt: float) -> ActorForecast:
    """Roll the motion model forward without measurements."""
    if not (horizon > 0 and dt > 0):
        raise ValueError("horizon and dt must be positive")
    n = int(round(horizon / dt)) + 1
    times = np.arange(n) * dt
    x = filt.state
    if filt.model_kind == PERSON:
        vel = np.array([x[3], x[4], 0.0])
        pos = x[:3] + times[:, None] * vel
        speed = math.hypot(x[3], x[4])
        h = math.atan2(x[4], x[3]) if speed >= 0.1 else filt.last_heading
        heads = np.full(n, h)
    else:
        v = x[3]
        pos = np.empty((n, 3))
        heads = np.empty(n)
        for i, t in enumerate(times):
            xi, _ = _ctrv_predict(x, t) if t > 0 else (x, None)
            pos[i] = xi[:3]
            ang = xi[4] if v >= 0 else xi[4] + math.pi
            heads[i] = wrap_angle(ang) if abs(v) >= 0.1 else filt.last_heading
    return ActorForecast(times, pos, heads)


# -- observation logs ----------------------------------------------------------

def write_observations(path, observations: Iterable[ActorObservation]) -> Path:
    """JSON lines, one ``{t, x, y, z, psi}`` object per observation."""
    path = Path(path)
    with open(path, "w") as fh:
        for o in observations:
            x, y, z = o.world_position
            fh.write(json.dumps({"t": o.timestamp, "x": x, "y": y, "z": z, "psi": o.heading}) + "\n")
    return path


def read_observations(path) -> Iterator[ActorObservation]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                yield ActorObservation(float(rec["t"]), (rec["x"], rec["y"], rec["z"]), float(rec["psi"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad observation record ({exc})") from None
