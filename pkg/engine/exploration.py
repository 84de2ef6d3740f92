"""Per-instance exploration, scan-path repair and execution over a ground-truth world."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial import cKDTree

from . import trace
from .evaluation import InspectionOutcome
from .geometry import PointCloud, VoxelGrid, VoxelState, inflate, raycast_update, sphere_offsets, voxel_keys
from .interfaces import OdometrySource
from .lidar import LidarConfig, SimLidar, SimWorld
from .perception import StructureInstance, StructureKind
from .planner import PlannerConfig, UnreachableError, astar, initial_path, plan_trajectory, point_key
from .scan_planning import CameraModel, ScanPath, choose_free_side, compute_fov
from .trajectory import (
    BSplineTrajectory,
    FlightLog,
    MavSimState,
    ObstacleIndex,
    OptimizeResult,
    SimSettings,
    TrackerGains,
    audit,
    optimize,
    simulate_flight,
)

BLOCKED_STATES = (VoxelState.OBSTACLE, VoxelState.INFLATED)


class ExplorationConfig(BaseModel):
    tau: float = Field(0.95, gt=0, le=1)
    goals_per_lap: int = Field(6, ge=1)
    goal_margin: float = Field(1.0, ge=0)
    max_attempts: int = Field(3, ge=0)
    relocation_step: float = Field(0.5, gt=0)
    scan_interval: float = Field(0.5, gt=0)
    map_resolution: float = Field(0.2, gt=0)
    scan_speed: float = Field(0.5, gt=0)
    capture_tolerance: float = Field(0.2, gt=0)
    max_replans: int = Field(3, ge=0)
    trim_blocked_ends: bool = True
    lidar: LidarConfig = Field(default_factory=LidarConfig)

    model_config = ConfigDict(extra="forbid")


def path_roi(positions: np.ndarray, resolution: float, radius: float) -> np.ndarray:
    """Voxel keys whose centres lie within ``radius`` of the polyline samples."""
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    if not len(pts) or radius <= 0:
        return np.zeros((0, 3), dtype=np.int64)
    offsets = np.vstack([np.zeros((1, 3), dtype=np.int64), sphere_offsets(radius + resolution, resolution)])
    base = np.unique(voxel_keys(pts, resolution), axis=0)
    cand = np.unique((base[:, None, :] + offsets[None, :, :]).reshape(-1, 3), axis=0)
    dist, _ = cKDTree(pts).query((cand + 0.5) * resolution)
    return cand[dist <= radius + 1e-9]


def exploration_rate(task_map: VoxelGrid, roi: np.ndarray) -> float:
    """Known share of the region of interest; an empty region counts as fully known."""
    if not len(roi):
        return 1.0
    states = task_map.states(roi)
    return float(np.count_nonzero(states >= 0)) / len(roi)


@dataclass
class ExplorationSession:
    instance_id: str
    task_map: VoxelGrid
    roi: np.ndarray
    tau: float
    alpha: float = 0.0
    attempt: int = 0
    goals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")

    @property
    def done(self) -> bool:
        return self.alpha >= self.tau

    def update(self) -> float:
        alpha = exploration_rate(self.task_map, self.roi)
        if alpha < self.alpha:
            trace.warn(f"{self.instance_id}: exploration rate fell from {self.alpha:.4f} to {alpha:.4f}")
        self.alpha = max(self.alpha, alpha)
        self.history.append(self.alpha)
        return self.alpha


def goal_height(attempt: int, band: tuple[float, float], step: float) -> float:
    """Mid-band first, then lower, lowest and higher retries, clamped into the band."""
    shifts = (0.0, -1.0, -2.0, 1.0)
    shift = shifts[min(attempt, len(shifts) - 1)] * step
    lo, hi = band
    return float(np.clip(0.5 * (lo + hi) + shift, lo, hi))


def instance_band(instance: StructureInstance, band: tuple[float, float]) -> tuple[float, float]:
    if instance.column is not None:
        lo, hi = max(band[0], instance.column.z_min), min(band[1], instance.column.z_max)
        if hi > lo:
            return lo, hi
    return band


def _relocate(goals: np.ndarray, outward: np.ndarray, grid: VoxelGrid, step: float, tries: int = 3) -> np.ndarray:
    keep = []
    for goal, out in zip(goals, outward, strict=True):
        for k in range(tries + 1):
            shifted = goal + k * step * out
            if grid.state_at(shifted) not in BLOCKED_STATES:
                keep.append(shifted)
                break
    return np.asarray(keep, dtype=float).reshape(-1, 3)


def gen_exploration_goals(
    instance: StructureInstance,
    attempt: int,
    cam: CameraModel,
    band: tuple[float, float],
    config: ExplorationConfig,
    *,
    cloud: PointCloud | None = None,
    grid: VoxelGrid | None = None,
    map_centroid: np.ndarray | None = None,
    start: np.ndarray | None = None,
) -> np.ndarray:
    """Observation goals around a column or in front of a wall, height-shifted on retries."""
    fov = compute_fov(cam)
    lo, hi = instance_band(instance, band)
    z = goal_height(attempt, (lo, hi), 0.5 * fov.height)
    if instance.kind is StructureKind.COLUMN and instance.column is not None:
        axis = instance.column
        ring = axis.radius + cam.distance + config.goal_margin
        k = config.goals_per_lap
        theta = 2.0 * math.pi * np.arange(k) / k
        outward = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(k)])
        goals = np.column_stack([axis.center + ring * outward[:, :2], np.full(k, z)])
    elif instance.kind is StructureKind.WALL and instance.plane is not None:
        if cloud is None:
            raise ValueError("wall goals need the prior cloud")
        pts = cloud.points[instance.indices]
        normal = choose_free_side(instance.plane.normal, pts, cam.distance, grid=grid, map_centroid=map_centroid)
        u = np.cross(normal, [0.0, 0.0, 1.0])
        u = u / np.linalg.norm(u)
        along = pts @ u
        t_lo, t_hi = float(along.min()), float(along.max())
        count = max(1, math.ceil((t_hi - t_lo) / fov.width - 1e-9))
        t = t_lo + (t_hi - t_lo) * (np.arange(count) + 0.5) / count
        base = pts.mean(axis=0)
        base = base - (base @ u) * u
        offset = (cam.distance + config.goal_margin) * normal
        goals = base + t[:, None] * u + offset
        goals[:, 2] = z
        outward = np.tile(normal, (count, 1))
    else:
        raise ValueError(f"no exploration goals for a {instance.kind.value} instance")
    if grid is not None:
        goals = _relocate(goals, outward, grid, config.relocation_step)
        if not len(goals):
            raise UnreachableError(f"all exploration goals of {instance.instance_id} are blocked")
    if start is not None and len(goals) > 1:
        nearest = int(np.argmin(np.linalg.norm(goals - np.asarray(start, float), axis=1)))
        if instance.kind is StructureKind.COLUMN:
            goals = np.roll(goals, -nearest, axis=0)
        elif nearest >= len(goals) / 2:
            goals = goals[::-1]
    return goals


def _blocked_mask(task_map: VoxelGrid, positions: np.ndarray) -> np.ndarray:
    states = task_map.states(voxel_keys(positions, task_map.resolution))
    return (states == VoxelState.OBSTACLE) | (states == VoxelState.INFLATED)


def trim_blocked_ends(task_map: VoxelGrid, path: ScanPath) -> ScanPath:
    """Drop leading and trailing waypoints that sit in blocked voxels."""
    blocked = _blocked_mask(task_map, path.positions)
    free = np.nonzero(~blocked)[0]
    if not free.size:
        raise UnreachableError(f"every waypoint of {path.instance_id} is blocked")
    lo, hi = int(free[0]), int(free[-1]) + 1
    if hi - lo < 2:
        raise UnreachableError(f"{path.instance_id}: a single waypoint is left after trimming blocked ends")
    if lo == 0 and hi == len(path):
        return path
    trace.debug(f"{path.instance_id}: trimmed {lo} leading and {len(path) - hi} trailing waypoints")
    return path.replace(path.positions[lo:hi], path.yaws[lo:hi])


def _detour_yaws(path: ScanPath, points: np.ndarray, fallback: float) -> np.ndarray:
    if path.center is not None:
        return np.arctan2(path.center[1] - points[:, 1], path.center[0] - points[:, 0])
    return np.full(len(points), fallback)


def check_and_replan(task_map: VoxelGrid, path: ScanPath, *, max_expansions: int = 200_000) -> ScanPath:
    """Replace every blocked waypoint run by an A* detour through known-free voxels."""
    blocked = _blocked_mask(task_map, path.positions)
    if not blocked.any():
        return path
    if blocked[0] or blocked[-1]:
        raise UnreachableError(f"{path.instance_id}: scan path starts or ends in a blocked voxel")
    r = task_map.resolution
    positions: list[np.ndarray] = []
    yaws: list[np.ndarray] = []
    i = 0
    n = len(path)
    while i < n:
        if not blocked[i]:
            positions.append(path.positions[i : i + 1])
            yaws.append(path.yaws[i : i + 1])
            i += 1
            continue
        j = i
        while blocked[j]:
            j += 1
        before, after = path.positions[i - 1], path.positions[j]
        keys = astar(task_map, point_key(before, r), point_key(after, r), relax_endpoints=True, max_expansions=max_expansions)
        inner = (np.asarray(keys[1:-1], dtype=float).reshape(-1, 3) + 0.5) * r
        if len(inner):
            positions.append(inner)
            yaws.append(_detour_yaws(path, inner, float(path.yaws[i])))
        trace.debug(f"{path.instance_id}: waypoints {i}..{j - 1} replaced by {len(inner)} detour voxels")
        i = j
    return path.replace(np.concatenate(positions), np.concatenate(yaws))


def repair_scan_path(task_map: VoxelGrid, path: ScanPath, *, trim_ends: bool = True) -> tuple[ScanPath, int]:
    """Blocked-end trimming followed by :func:`check_and_replan`; also returns how many end waypoints were dropped.

    With ``trim_ends`` false a blocked first or last waypoint makes the path unreachable.
    """
    trimmed = trim_blocked_ends(task_map, path) if trim_ends else path
    dropped = len(path) - len(trimmed)
    if dropped:
        trace.warn(f"{path.instance_id}: {dropped} blocked end waypoints dropped, not captured")
    return check_and_replan(task_map, trimmed), dropped


@dataclass
class InspectionRecord:
    outcome: InspectionOutcome
    task_map: VoxelGrid
    reference: ScanPath | None = None
    final_path: ScanPath | None = None
    trajectory: BSplineTrajectory | None = None
    log: FlightLog | None = None
    flown: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


@dataclass(frozen=True)
class InspectionContext:
    """Everything the executor needs besides the instances themselves."""

    world: SimWorld
    cloud: PointCloud
    camera: CameraModel
    band: tuple[float, float]
    exploration: ExplorationConfig
    planner: PlannerConfig
    gains: TrackerGains
    sim: SimSettings
    seed: int = 0
    odometry: Callable[[], OdometrySource] | None = None


class _Mover:
    """Idealised exploration flight: follows the planned reference and scans at a fixed interval."""

    def __init__(self, ctx: InspectionContext, session: ExplorationSession, lidar: SimLidar, position: np.ndarray) -> None:
        self.ctx = ctx
        self.session = session
        self.lidar = lidar
        self.position = np.asarray(position, dtype=float).reshape(3)
        self.flown: list[np.ndarray] = [self.position.copy()]
        self.distance = 0.0

    def scan(self) -> np.ndarray:
        frame = self.lidar.scan(self.position)
        raycast_update(self.session.task_map, self.position, frame)
        self.session.update()
        return frame.points

    def _advance(self, samples: np.ndarray) -> None:
        if len(samples):
            steps = np.diff(np.vstack([self.position, samples]), axis=0)
            self.distance += float(np.sum(np.linalg.norm(steps, axis=1)))
            self.flown.append(samples)
            self.position = samples[-1].copy()

    def move_to(self, goal: np.ndarray, *, stop_when_done: bool = True) -> bool:
        """Fly toward ``goal``, rescanning and replanning when new obstacles block the rest of the route."""
        cfg = self.ctx.exploration
        safety = self.ctx.planner.weights.safety_distance
        for _ in range(cfg.max_replans + 1):
            plan = plan_trajectory(self.position, goal, self.session.task_map, self.ctx.planner, allow_unknown=True)
            traj = plan.trajectory
            fine = cfg.scan_interval / 5.0
            times = np.append(np.arange(traj.t_start, traj.t_end, fine), traj.t_end)
            route = traj.evaluate(times)
            per_scan = 5
            replan = False
            for k in range(1, len(route)):
                self._advance(route[k : k + 1])
                if k % per_scan and k != len(route) - 1:
                    continue
                hits = self.scan()
                if stop_when_done and self.session.done:
                    return True
                rest = route[k + 1 :]
                if len(rest) and len(hits):
                    centers = (voxel_keys(hits, self.session.task_map.resolution) + 0.5) * self.session.task_map.resolution
                    dist, _ = cKDTree(centers).query(rest)
                    if bool(np.any(dist <= safety)):
                        trace.debug(f"{self.session.instance_id}: route blocked after scan, replanning")
                        replan = True
                        break
            if not replan:
                return True
        return False


def _yaw_profile(path: ScanPath, positions: np.ndarray) -> np.ndarray:
    if path.center is not None:
        return np.arctan2(path.center[1] - positions[:, 1], path.center[0] - positions[:, 0])
    _, idx = cKDTree(path.positions).query(positions)
    return path.yaws[idx]


def scan_trajectory(path: ScanPath, task_map: VoxelGrid, planner: PlannerConfig, speed: float) -> OptimizeResult:
    """Time-parametrised scan path, locally optimised where it comes close to known obstacles."""
    step = min(0.25, 0.5 * speed * planner.dt)
    polyline = path.densify(step)
    keep = np.ones(len(polyline), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(polyline, axis=0), axis=1) > 1e-9
    polyline = polyline[keep]
    if len(polyline) < 2:
        polyline = np.vstack([polyline, polyline])
    traj = initial_path(polyline, planner.model_copy(update={"cruise_speed": speed}))
    obstacles = ObstacleIndex(task_map)
    reach = 1.5 * planner.routing_margin
    dist, _ = obstacles.nearest(traj.control_points)
    near = dist <= reach
    if not near.any():
        return OptimizeResult(traj, 0.0, 0, audit(traj, obstacles, planner.weights))
    movable = np.convolve(near.astype(float), np.ones(2 * traj.degree + 1), mode="same") > 0
    return optimize(traj, task_map, planner.weights, max_iterations=planner.max_iterations, obstacles=obstacles, movable=movable)


def _captures(reference: ScanPath, flown: np.ndarray, tolerance: float) -> int:
    if not len(flown):
        return 0
    dist, _ = cKDTree(flown).query(reference.positions)
    return int(np.count_nonzero(dist <= tolerance))


def inspect_instance(
    instance: StructureInstance,
    reference: ScanPath,
    ctx: InspectionContext,
    position: np.ndarray,
    index: int = 0,
) -> tuple[InspectionRecord, np.ndarray]:
    """Explore around one instance with a fresh task map, repair its scan path and fly it."""
    cfg = ctx.exploration
    world = ctx.world
    task_map = VoxelGrid(cfg.map_resolution, (world.lower, world.upper))
    roi = path_roi(reference.densify(0.5 * cfg.map_resolution), cfg.map_resolution, ctx.planner.weights.safety_distance)
    session = ExplorationSession(instance.instance_id, task_map, roi, cfg.tau)
    lidar = SimLidar(world, cfg.lidar, seed=ctx.seed + 7919 * index)
    mover = _Mover(ctx, session, lidar, position)
    outcome = InspectionOutcome(instance=instance.instance_id, kind=instance.kind.value)
    record = InspectionRecord(outcome, task_map, reference)
    centroid = ctx.cloud.points.mean(axis=0)

    mover.scan()
    while not session.done and session.attempt <= cfg.max_attempts:
        try:
            session.goals = gen_exploration_goals(
                instance, session.attempt, ctx.camera, ctx.band, cfg, cloud=ctx.cloud, grid=task_map, map_centroid=centroid, start=mover.position
            )
        except UnreachableError as exc:
            trace.warn(str(exc))
            session.attempt += 1
            continue
        for goal in session.goals:
            try:
                mover.move_to(goal)
            except UnreachableError as exc:
                trace.debug(f"{instance.instance_id}: goal skipped ({exc})")
            if session.done:
                break
        session.attempt += 1
    explored = session.done
    if not explored:
        trace.warn(f"{instance.instance_id}: exploration rate {session.alpha:.3f} below {session.tau:g} after {session.attempt} attempts")

    inflate(task_map, ctx.planner.weights.safety_distance)
    outcome_update: dict[str, object] = {"explored": explored, "alpha_final": session.alpha, "alpha_history": list(session.history)}
    try:
        path, trimmed = repair_scan_path(task_map, reference, trim_ends=cfg.trim_blocked_ends)
        mover.move_to(path.positions[0], stop_when_done=False)
    except UnreachableError as exc:
        trace.warn(f"{instance.instance_id}: unreachable ({exc})")
        record.outcome = outcome.model_copy(
            update=outcome_update | {"reachable": False, "exploration_distance": mover.distance, "message": str(exc)}
        )
        record.flown = np.vstack(mover.flown)
        return record, mover.position

    result = scan_trajectory(path, task_map, ctx.planner, cfg.scan_speed)
    traj = result.trajectory
    steps = max(1, math.ceil((traj.duration + ctx.sim.settle_time) / ctx.sim.dt))
    ref_positions = traj.evaluate(traj.t_start + ctx.sim.dt * np.arange(steps + 1))
    log = simulate_flight(
        traj,
        MavSimState(position=mover.position, mass=ctx.sim.mass),
        ctx.gains,
        ctx.sim.dt,
        settings=ctx.sim,
        yaw_at=_yaw_profile(path, ref_positions),
        odometry=ctx.odometry() if ctx.odometry is not None else None,
    )
    flown = np.vstack(mover.flown)
    intrusions = int(np.count_nonzero(world.occupied(flown))) + int(np.count_nonzero(world.occupied(log.positions)))
    captures = _captures(reference, log.positions, cfg.capture_tolerance)
    scan_length = float(np.sum(np.linalg.norm(np.diff(log.positions, axis=0), axis=1)))
    record.final_path = path
    record.trajectory = traj
    record.log = log
    record.flown = flown
    record.outcome = outcome.model_copy(
        update=outcome_update
        | {
            "success": intrusions == 0,
            "exploration_distance": mover.distance,
            "scan_length": scan_length,
            "captures": captures,
            "capture_ratio": captures / len(reference),
            "trimmed": trimmed,
            "violations": len(result.violations),
            "intrusions": intrusions,
            "tracking_rmse": log.tracking_rmse(),
        }
    )
    trace.debug(f"{instance.instance_id}: alpha {session.alpha:.3f} captures {captures}/{len(reference)} intrusions {intrusions}")
    return record, log.positions[-1].copy()


def run_inspection(
    instances: list[StructureInstance],
    paths: dict[str, ScanPath],
    ctx: InspectionContext,
    start: np.ndarray,
) -> list[InspectionRecord]:
    """Inspect every instance with a scan path in order; a failure is recorded and the run continues."""
    position = np.asarray(start, dtype=float).reshape(3)
    records: list[InspectionRecord] = []
    for index, inst in enumerate(instances):
        reference = paths.get(inst.instance_id)
        if reference is None:
            continue
        try:
            record, position = inspect_instance(inst, reference, ctx, position, index)
        except (UnreachableError, ValueError) as exc:
            trace.warn(f"{inst.instance_id}: inspection failed ({exc})")
            grid = VoxelGrid(ctx.exploration.map_resolution, (ctx.world.lower, ctx.world.upper))
            record = InspectionRecord(InspectionOutcome(instance=inst.instance_id, kind=inst.kind.value, message=str(exc)), grid, reference)
        records.append(record)
    return records


__all__ = [
    "ExplorationConfig",
    "ExplorationSession",
    "InspectionContext",
    "InspectionRecord",
    "check_and_replan",
    "exploration_rate",
    "gen_exploration_goals",
    "goal_height",
    "inspect_instance",
    "path_roi",
    "repair_scan_path",
    "run_inspection",
    "scan_trajectory",
    "trim_blocked_ends",
]
