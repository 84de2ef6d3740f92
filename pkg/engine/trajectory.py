"""Uniform B-spline trajectories, their optimisation, and the tracking simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.interpolate import BSpline
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from . import trace
from .geometry import VoxelGrid, VoxelState

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .interfaces import OdometrySource

GRAVITY = 9.81


@dataclass(frozen=True)
class BSplineTrajectory:
    control_points: np.ndarray
    dt: float
    degree: int = 3

    def __post_init__(self) -> None:
        q = np.asarray(self.control_points, dtype=float).reshape(-1, 3)
        if self.dt <= 0:
            raise ValueError("knot interval must be positive")
        if len(q) < self.degree + 1:
            raise ValueError(f"need at least {self.degree + 1} control points for degree {self.degree}")
        object.__setattr__(self, "control_points", q)

    @property
    def knots(self) -> np.ndarray:
        return self.dt * np.arange(len(self.control_points) + self.degree + 1, dtype=float)

    @property
    def t_start(self) -> float:
        return self.degree * self.dt

    @property
    def t_end(self) -> float:
        return len(self.control_points) * self.dt

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def spline(self) -> BSpline:
        return BSpline(self.knots, self.control_points, self.degree, extrapolate=False)

    def evaluate(self, t: float | np.ndarray, nu: int = 0) -> np.ndarray:
        """Position (or ``nu``-th derivative) at times clamped into the valid span."""
        tt = np.clip(np.asarray(t, dtype=float), self.t_start, self.t_end)
        spl = self.spline()
        return spl(tt, nu) if nu else spl(tt)

    def sample(self, step: float) -> tuple[np.ndarray, np.ndarray]:
        count = max(2, math.ceil(self.duration / step) + 1)
        times = np.linspace(self.t_start, self.t_end, count)
        return times, self.evaluate(times)

    def length(self, step: float = 0.01) -> float:
        _, pos = self.sample(step)
        return float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1)))

    def with_control_points(self, control_points: np.ndarray) -> BSplineTrajectory:
        return BSplineTrajectory(control_points, self.dt, self.degree)


def bspline_dynamics(traj: BSplineTrajectory | np.ndarray, dt: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Velocity, acceleration and jerk control points by finite differences."""
    if isinstance(traj, BSplineTrajectory):
        q, step = traj.control_points, traj.dt
    else:
        if dt is None or dt <= 0:
            raise ValueError("dt must be positive")
        q, step = np.asarray(traj, dtype=float).reshape(-1, 3), dt
    v = np.diff(q, axis=0) / step
    a = np.diff(v, axis=0) / step
    j = np.diff(a, axis=0) / step
    return v, a, j


def collision_distance(q: np.ndarray, p: np.ndarray, v: np.ndarray) -> float:
    """Length of the projection of ``q - p`` onto the escape direction ``v``."""
    direction = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(direction))
    if norm == 0:
        return 0.0
    return abs(float((np.asarray(q, dtype=float) - np.asarray(p, dtype=float)) @ direction) / norm)


class OptWeights(BaseModel):
    lambda_c: float = Field(10.0, ge=0)
    lambda_s: float = Field(1.0, ge=0)
    lambda_d: float = Field(1.0, ge=0)
    w_v: float = Field(1.0, ge=0)
    w_a: float = Field(1.0, ge=0)
    w_j: float = Field(1.0, ge=0)
    safety_distance: float = Field(0.5, gt=0)
    v_max: float = Field(2.5, gt=0)
    a_max: float = Field(3.0, gt=0)
    j_max: float = Field(4.0, gt=0)
    clearance_margin: float = Field(0.1, ge=0)
    strict_collision_cost: bool = False

    model_config = ConfigDict(extra="forbid")


@dataclass(frozen=True)
class EscapeAnchors:
    """Per control point: nearest obstacle centre and the unit direction away from it."""

    indices: np.ndarray
    points: np.ndarray
    directions: np.ndarray

    @classmethod
    def empty(cls) -> EscapeAnchors:
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)))

    def __len__(self) -> int:
        return int(self.indices.size)


class ObstacleIndex:
    """Nearest-obstacle queries over the obstacle voxel centres of a grid."""

    def __init__(self, grid: VoxelGrid | None) -> None:
        keys = grid.keys(VoxelState.OBSTACLE) if grid is not None else np.zeros((0, 3), dtype=np.int64)
        self.centers = (keys + 0.5) * grid.resolution if grid is not None and len(keys) else np.zeros((0, 3))
        self.tree = cKDTree(self.centers) if len(self.centers) else None

    def nearest(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if self.tree is None:
            return np.full(len(pts), np.inf), np.zeros((len(pts), 3))
        dist, idx = self.tree.query(pts)
        return dist, self.centers[idx]


def escape_anchors(control_points: np.ndarray, obstacles: ObstacleIndex, reach: float, free: np.ndarray | None = None) -> EscapeAnchors:
    dist, nearest = obstacles.nearest(control_points)
    mask = dist <= reach
    if free is not None:
        mask &= free
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return EscapeAnchors.empty()
    offset = control_points[idx] - nearest[idx]
    norm = np.linalg.norm(offset, axis=1, keepdims=True)
    directions = np.where(norm > 1e-9, offset / np.maximum(norm, 1e-12), np.array([0.0, 0.0, 1.0]))
    return EscapeAnchors(idx, nearest[idx], directions)


def collision_penalty(d: np.ndarray, safety: float, *, strict: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise clearance penalty and its derivative in ``d``.

    Cubic below ``safety``; between ``safety`` and ``1.5 * safety`` a squared band
    tapered to vanish at the outer edge (``strict`` uses the linear band as printed).
    """
    d = np.asarray(d, dtype=float)
    value = np.zeros_like(d)
    grad = np.zeros_like(d)
    inner = d <= safety
    value[inner] = (safety - d[inner]) ** 3
    grad[inner] = -3.0 * (safety - d[inner]) ** 2
    band = (d > safety) & (d <= 1.5 * safety)
    if strict:
        value[band] = 3.0 * (safety - d[band])
        grad[band] = -3.0
    else:
        e = d[band] - safety
        w = (1.5 * safety - d[band]) / (0.5 * safety)
        value[band] = 3.0 * e**2 * w**2
        grad[band] = 6.0 * e * w**2 - 3.0 * e**2 * 2.0 * w / (0.5 * safety)
    return value, grad


def feasibility_penalty(c: np.ndarray, limit: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-component limit penalty: zero inside ``limit``, cubic up to twice it, quadratic beyond."""
    mag = np.abs(c)
    value = np.zeros_like(c)
    grad = np.zeros_like(c)
    mid = (mag > limit) & (mag < 2.0 * limit)
    high = mag >= 2.0 * limit
    value[mid] = (mag[mid] - limit) ** 3
    grad[mid] = 3.0 * (mag[mid] - limit) ** 2 * np.sign(c[mid])
    value[high] = c[high] ** 2
    grad[high] = 2.0 * c[high]
    return value, grad


def _diff_adjoint(g: np.ndarray) -> np.ndarray:
    """Adjoint of ``np.diff(x, axis=0)``."""
    zero = np.zeros((1, g.shape[1]))
    return np.concatenate([zero, g]) - np.concatenate([g, zero])


def cost_and_grad(
    traj: BSplineTrajectory,
    anchors: EscapeAnchors,
    weights: OptWeights,
) -> tuple[float, np.ndarray]:
    """Weighted clearance, smoothness and feasibility cost with its gradient per control point."""
    q = traj.control_points
    dt = traj.dt
    grad = np.zeros_like(q)
    total = 0.0

    if len(anchors) and weights.lambda_c > 0:
        offset = q[anchors.indices] - anchors.points
        d = np.einsum("ij,ij->i", offset, anchors.directions)
        value, slope = collision_penalty(d, weights.safety_distance, strict=weights.strict_collision_cost)
        total += weights.lambda_c * float(value.sum())
        np.add.at(grad, anchors.indices, weights.lambda_c * slope[:, None] * anchors.directions)

    v, a, j = bspline_dynamics(traj)
    if weights.lambda_s > 0:
        total += weights.lambda_s * float(np.sum(a**2) + np.sum(j**2))
        ga = 2.0 * a
        gj = 2.0 * j
        g_from_a = _diff_adjoint(_diff_adjoint(ga / dt) / dt) / dt
        g_from_j = _diff_adjoint(_diff_adjoint(_diff_adjoint(gj / dt) / dt) / dt)
        grad += weights.lambda_s * (g_from_a + g_from_j)

    if weights.lambda_d > 0:
        bv, gv = feasibility_penalty(v, weights.v_max)
        ba, gacc = feasibility_penalty(a, weights.a_max)
        bj, gjerk = feasibility_penalty(j, weights.j_max)
        total += weights.lambda_d * (weights.w_v * float(bv.sum()) + weights.w_a * float(ba.sum()) + weights.w_j * float(bj.sum()))
        g = weights.w_v * _diff_adjoint(gv / dt)
        g += weights.w_a * _diff_adjoint(_diff_adjoint(gacc / dt) / dt)
        g += weights.w_j * _diff_adjoint(_diff_adjoint(_diff_adjoint(gjerk / dt) / dt) / dt)
        grad += weights.lambda_d * g
    return total, grad


@dataclass(frozen=True)
class Violation:
    kind: str
    index: int
    value: float
    limit: float


@dataclass(frozen=True)
class OptimizeResult:
    trajectory: BSplineTrajectory
    cost: float
    iterations: int
    violations: list[Violation] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations


def audit(traj: BSplineTrajectory, obstacles: ObstacleIndex, weights: OptWeights, *, tol: float = 1e-3) -> list[Violation]:
    """Clearance and dynamic-limit violations at the control points."""
    found: list[Violation] = []
    dist, _ = obstacles.nearest(traj.control_points)
    for i in np.nonzero(dist <= weights.safety_distance)[0]:
        found.append(Violation("clearance", int(i), float(dist[i]), weights.safety_distance))
    v, a, j = bspline_dynamics(traj)
    for name, arr, limit in (("velocity", v, weights.v_max), ("acceleration", a, weights.a_max), ("jerk", j, weights.j_max)):
        peak = np.max(np.abs(arr), axis=1) if len(arr) else np.zeros(0)
        for i in np.nonzero(peak > limit + tol)[0]:
            found.append(Violation(name, int(i), float(peak[i]), limit))
    return found


def optimize(
    traj: BSplineTrajectory,
    grid: VoxelGrid | None,
    weights: OptWeights,
    *,
    max_iterations: int = 200,
    gtol: float = 1e-4,
    rounds: int = 3,
    obstacles: ObstacleIndex | None = None,
    movable: np.ndarray | None = None,
) -> OptimizeResult:
    """Quasi-Newton descent on the free control points; the first and last ``degree`` stay fixed.

    ``movable`` further restricts which control points may move.
    """
    obstacles = obstacles or ObstacleIndex(grid)
    n = len(traj.control_points)
    fixed = traj.degree
    free = np.zeros(n, dtype=bool)
    free[fixed : n - fixed] = True
    if movable is not None:
        free &= np.asarray(movable, dtype=bool)
    cost_weights = weights.model_copy(update={"safety_distance": weights.safety_distance + weights.clearance_margin})
    reach = 1.5 * cost_weights.safety_distance
    current = traj
    iterations = 0
    cost = float("nan")
    for _ in range(rounds):
        if not free.any():
            break
        anchors = escape_anchors(current.control_points, obstacles, reach, free)
        base = current.control_points.copy()

        def fun(x: np.ndarray, base: np.ndarray = base, anchors: EscapeAnchors = anchors) -> tuple[float, np.ndarray]:
            q = base.copy()
            q[free] = x.reshape(-1, 3)
            value, grad = cost_and_grad(current.with_control_points(q), anchors, cost_weights)
            return value, grad[free].ravel()

        res = minimize(
            fun,
            base[free].ravel(),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": max_iterations, "gtol": gtol, "ftol": 1e-15},
        )
        q = base.copy()
        q[free] = res.x.reshape(-1, 3)
        current = current.with_control_points(q)
        iterations += int(res.nit)
        cost = float(res.fun)
        violations = audit(current, obstacles, weights)
        if not violations:
            break
        if any(v.kind == "clearance" for v in violations):
            cost_weights = cost_weights.model_copy(update={"lambda_c": cost_weights.lambda_c * 4.0})
    else:
        violations = audit(current, obstacles, weights)
    if not free.any():
        violations = audit(current, obstacles, weights)
        cost = cost_and_grad(current, EscapeAnchors.empty(), cost_weights)[0]
    if violations:
        trace.debug(f"optimize left {len(violations)} violations after {iterations} iterations")
    return OptimizeResult(current, cost, iterations, violations)


class FlatOutput(NamedTuple):
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    yaw: float = 0.0


class AttitudeCommand(NamedTuple):
    theta: float
    phi: float
    psi: float


class TrackerGains(BaseModel):
    kp: float = Field(6.0, ge=0)
    kd: float = Field(4.5, ge=0)

    model_config = ConfigDict(extra="forbid")


@dataclass(frozen=True)
class MavSimState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta: float = 0.0
    phi: float = 0.0
    psi: float = 0.0
    mass: float = 1.0
    gravity: float = GRAVITY

    def __post_init__(self) -> None:
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))


def track_step(
    goal: FlatOutput,
    odom: tuple[np.ndarray, np.ndarray],
    gains: TrackerGains,
    sim: MavSimState,
) -> tuple[AttitudeCommand, float]:
    """PD feedback on position and velocity, mapped to small-angle attitude and thrust."""
    if gains.kp < 0 or gains.kd < 0:
        raise ValueError("gains must be non-negative")
    pos, vel = odom
    acc = np.asarray(goal.acceleration, float) + gains.kd * (np.asarray(goal.velocity, float) - vel) + gains.kp * (np.asarray(goal.position, float) - pos)
    psi = sim.psi
    g = sim.gravity
    theta = (acc[0] * math.cos(psi) + acc[1] * math.sin(psi)) / g
    phi = (acc[0] * math.sin(psi) - acc[1] * math.cos(psi)) / g
    thrust = sim.mass * (acc[2] + g)
    return AttitudeCommand(theta, phi, psi), thrust


def point_mass_acceleration(sim: MavSimState, thrust: float) -> np.ndarray:
    g = sim.gravity
    c, s = math.cos(sim.psi), math.sin(sim.psi)
    return g * np.array(
        [
            sim.theta * c + sim.phi * s,
            sim.theta * s - sim.phi * c,
            thrust / (sim.mass * g) - 1.0,
        ]
    )


class SimSettings(BaseModel):
    dt: float = Field(0.01, gt=0, le=0.01)
    attitude_lag: float = Field(0.1, ge=0)
    drag: float = Field(0.1, ge=0)
    mass: float = Field(1.0, gt=0)
    settle_time: float = Field(0.0, ge=0)

    model_config = ConfigDict(extra="forbid")


@dataclass(frozen=True)
class FlightLog:
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    reference: np.ndarray
    estimates: np.ndarray
    yaws: np.ndarray

    def __len__(self) -> int:
        return int(self.times.size)

    def tracking_rmse(self) -> float:
        err = np.linalg.norm(self.positions - self.reference, axis=1)
        return float(np.sqrt(np.mean(err**2))) if err.size else 0.0


def simulate_flight(
    traj: BSplineTrajectory,
    sim: MavSimState,
    gains: TrackerGains,
    dt: float = 0.01,
    *,
    settings: SimSettings | None = None,
    yaw_at: np.ndarray | None = None,
    odometry: OdometrySource | None = None,
) -> FlightLog:
    """Fly the tracker along the spline on the point-mass model and log odometry.

    ``yaw_at`` optionally holds one yaw per logged step.
    """
    settings = settings or SimSettings()
    if dt > 0.01:
        raise ValueError("simulator step must not exceed 0.01 s")
    spl = traj.spline()
    steps = max(1, math.ceil((traj.duration + settings.settle_time) / dt))
    times = traj.t_start + dt * np.arange(steps + 1)
    clamped = np.clip(times, traj.t_start, traj.t_end)
    ref_pos = spl(clamped)
    ref_vel = spl(clamped, 1)
    ref_acc = spl(clamped, 2)
    beyond = times > traj.t_end
    ref_vel[beyond] = 0.0
    ref_acc[beyond] = 0.0
    positions = np.zeros((steps + 1, 3))
    velocities = np.zeros((steps + 1, 3))
    estimates = np.zeros((steps + 1, 3))
    yaws = np.zeros(steps + 1)
    state = sim
    if odometry is not None:
        odometry.reset(state)
    est_pos, est_vel = state.position.copy(), state.velocity.copy()
    accel = np.zeros(3)
    for k in range(steps + 1):
        yaw = float(yaw_at[min(k, len(yaw_at) - 1)]) if yaw_at is not None and len(yaw_at) else state.psi
        state = replace(state, psi=yaw)
        positions[k] = state.position
        velocities[k] = state.velocity
        estimates[k] = est_pos
        yaws[k] = yaw
        if k == steps:
            break
        goal = FlatOutput(ref_pos[k], ref_vel[k], ref_acc[k], yaw)
        cmd, thrust = track_step(goal, (est_pos, est_vel), gains, state)
        alpha = 1.0 if settings.attitude_lag == 0 else min(1.0, dt / settings.attitude_lag)
        state = replace(
            state,
            theta=state.theta + alpha * (cmd.theta - state.theta),
            phi=state.phi + alpha * (cmd.phi - state.phi),
        )
        accel = point_mass_acceleration(state, thrust) - settings.drag * state.velocity
        velocity = state.velocity + accel * dt
        position = state.position + velocity * dt
        state = replace(state, position=position, velocity=velocity)
        if odometry is not None:
            est_pos, est_vel = odometry.step(state, accel, dt)
        else:
            est_pos, est_vel = state.position.copy(), state.velocity.copy()
    return FlightLog(times - traj.t_start, positions, velocities, ref_pos, estimates, yaws)


__all__ = [
    "GRAVITY",
    "AttitudeCommand",
    "BSplineTrajectory",
    "EscapeAnchors",
    "FlatOutput",
    "FlightLog",
    "MavSimState",
    "ObstacleIndex",
    "OptWeights",
    "OptimizeResult",
    "SimSettings",
    "TrackerGains",
    "Violation",
    "audit",
    "bspline_dynamics",
    "collision_distance",
    "collision_penalty",
    "cost_and_grad",
    "escape_anchors",
    "feasibility_penalty",
    "optimize",
    "point_mass_acceleration",
    "simulate_flight",
    "track_step",
]
