"""Plan requests: straight-line initial path, grid A* reroute and spline optimisation."""

from __future__ import annotations

import heapq
import itertools
import math
import time
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import trace
from .geometry import UNKNOWN, VoxelGrid, VoxelState, inflate, traverse_rays, voxel_keys
from .trajectory import BSplineTrajectory, ObstacleIndex, OptWeights, Violation, optimize

Key = tuple[int, int, int]

NEIGHBORS: tuple[tuple[int, int, int], ...] = tuple(d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0))
_STEP_COST = tuple(math.sqrt(dx * dx + dy * dy + dz * dz) for dx, dy, dz in NEIGHBORS)


class UnreachableError(ValueError):
    """No collision-free route exists between two voxels."""


class PlannerConfig(BaseModel):
    dt: float = Field(0.5, gt=0)
    cruise_speed: float = Field(1.0, gt=0)
    acceleration: float = Field(1.0, gt=0)
    weights: OptWeights = Field(default_factory=OptWeights)
    max_iterations: int = Field(200, gt=0)
    max_expansions: int = Field(200_000, gt=0)
    shortcut: bool = True

    model_config = ConfigDict(extra="forbid")

    @property
    def routing_margin(self) -> float:
        return self.weights.safety_distance + self.weights.clearance_margin


def point_key(point: np.ndarray, resolution: float) -> Key:
    row = voxel_keys(np.asarray(point, dtype=float).reshape(1, 3), resolution)[0]
    return (int(row[0]), int(row[1]), int(row[2]))


def _key_bounds(grid: VoxelGrid, points: Iterable[Key], pad: int) -> tuple[np.ndarray, np.ndarray]:
    if grid.bounds is not None:
        lo = np.floor(grid.bounds[0] / grid.resolution).astype(np.int64)
        hi = np.floor(grid.bounds[1] / grid.resolution).astype(np.int64)
        return lo, hi
    rows = np.array(list(points), dtype=np.int64).reshape(-1, 3)
    known = grid.keys()
    if len(known):
        rows = np.vstack([rows, known.min(axis=0), known.max(axis=0)])
    return rows.min(axis=0) - pad, rows.max(axis=0) + pad


def passability(grid: VoxelGrid, *, allow_unknown: bool, bounds: tuple[np.ndarray, np.ndarray]) -> Callable[[Key], bool]:
    """Memoised test: known-free voxels always pass, unknown ones only when allowed."""
    lo = tuple(int(v) for v in bounds[0])
    hi = tuple(int(v) for v in bounds[1])
    memo: dict[Key, bool] = {}

    def passable(key: Key) -> bool:
        hit = memo.get(key)
        if hit is not None:
            return hit
        inside = lo[0] <= key[0] <= hi[0] and lo[1] <= key[1] <= hi[1] and lo[2] <= key[2] <= hi[2]
        state = grid.get(key)
        ok = inside and (state == VoxelState.FREE if state is not None else allow_unknown)
        memo[key] = ok
        return ok

    return passable


def astar(
    grid: VoxelGrid,
    start: Key,
    goal: Key,
    *,
    allow_unknown: bool = False,
    relax_endpoints: bool = False,
    max_expansions: int = 200_000,
    pad: int = 10,
) -> list[Key]:
    """26-connected A* through free voxels; returns the voxel keys from start to goal.

    With ``relax_endpoints`` the start and goal only have to avoid obstacle voxels.
    """
    start = (int(start[0]), int(start[1]), int(start[2]))
    goal = (int(goal[0]), int(goal[1]), int(goal[2]))
    bounds = _key_bounds(grid, (start, goal), pad)
    passable = passability(grid, allow_unknown=allow_unknown, bounds=bounds)

    def endpoint_ok(key: Key) -> bool:
        return passable(key) or (relax_endpoints and grid.get(key) != VoxelState.OBSTACLE)

    if not endpoint_ok(start):
        raise UnreachableError(f"start voxel {start} is blocked")
    if not endpoint_ok(goal):
        raise UnreachableError(f"goal voxel {goal} is blocked")

    def h(k: Key) -> float:
        return math.sqrt((k[0] - goal[0]) ** 2 + (k[1] - goal[1]) ** 2 + (k[2] - goal[2]) ** 2)

    counter = itertools.count()
    open_set: list[tuple[float, int, Key]] = [(h(start), next(counter), start)]
    came_from: dict[Key, Key] = {}
    g_score: dict[Key, float] = {start: 0.0}
    closed: set[Key] = set()
    expansions = 0
    while open_set:
        _, _, current = heapq.heappop(open_set)
        if current == goal:
            path = [current]
            while current in came_from:
                current = came_from[current]
                path.append(current)
            trace.debug(f"astar expanded {expansions} voxels, path {len(path)}")
            return path[::-1]
        if current in closed:
            continue
        closed.add(current)
        expansions += 1
        if expansions > max_expansions:
            raise UnreachableError(f"search budget of {max_expansions} expansions exhausted")
        base = g_score[current]
        for (dx, dy, dz), cost in zip(NEIGHBORS, _STEP_COST, strict=True):
            nb = (current[0] + dx, current[1] + dy, current[2] + dz)
            if nb in closed or (nb != goal and not passable(nb)):
                continue
            tentative = base + cost
            if tentative < g_score.get(nb, math.inf):
                came_from[nb] = current
                g_score[nb] = tentative
                heapq.heappush(open_set, (tentative + h(nb), next(counter), nb))
    raise UnreachableError(f"no free route from {start} to {goal}")


def line_of_sight(a: np.ndarray, b: np.ndarray, resolution: float, passable: Callable[[Key], bool]) -> bool:
    crossed, end = traverse_rays(np.asarray(a, float), np.asarray(b, float).reshape(1, 3), resolution)
    for row in itertools.chain(crossed.tolist(), end.tolist()):
        if not passable((row[0], row[1], row[2])):
            return False
    return True


def shortcut(points: np.ndarray, resolution: float, passable: Callable[[Key], bool]) -> np.ndarray:
    """Greedy string pulling: keep only the waypoints needed for mutual visibility."""
    if len(points) <= 2:
        return points
    keep = [0]
    i = 0
    last = len(points) - 1
    while i < last:
        j = last
        while j > i + 1 and not line_of_sight(points[i], points[j], resolution, passable):
            j -= 1
        keep.append(j)
        i = j
    return points[keep]


def trapezoid_profile(distance: float, v_max: float, a_max: float) -> tuple[float, Callable[[np.ndarray], np.ndarray]]:
    """Duration and arc-length function of an accelerate-cruise-brake profile."""
    if distance <= 0:
        return 0.0, lambda t: np.zeros_like(np.asarray(t, dtype=float))
    t_acc = v_max / a_max
    if a_max * t_acc**2 >= distance:
        t_acc = math.sqrt(distance / a_max)
        v_peak = a_max * t_acc
        t_cruise = 0.0
    else:
        v_peak = v_max
        t_cruise = (distance - a_max * t_acc**2) / v_max
    total = 2.0 * t_acc + t_cruise

    def arc(t: np.ndarray) -> np.ndarray:
        t = np.clip(np.asarray(t, dtype=float), 0.0, total)
        s = np.where(t < t_acc, 0.5 * a_max * t**2, 0.0)
        cruising = (t >= t_acc) & (t <= t_acc + t_cruise)
        s = np.where(cruising, 0.5 * a_max * t_acc**2 + v_peak * (t - t_acc), s)
        braking = t > t_acc + t_cruise
        tb = total - t
        s = np.where(braking, distance - 0.5 * a_max * tb**2, s)
        return s

    return total, arc


def _along(polyline: np.ndarray, s: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(polyline, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return np.column_stack([np.interp(s, cum, polyline[:, k]) for k in range(3)])


def initial_path(waypoints: np.ndarray, config: PlannerConfig, degree: int = 3) -> BSplineTrajectory:
    """Time-parametrise the polyline and clamp both ends so the spline starts and stops at rest."""
    pts = np.asarray(waypoints, dtype=float).reshape(-1, 3)
    if len(pts) < 2:
        raise ValueError("initial path needs at least two waypoints")
    length = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    total, arc = trapezoid_profile(length, config.cruise_speed, config.acceleration)
    steps = max(1, math.ceil(total / config.dt - 1e-9))
    samples = _along(pts, arc(np.linspace(0.0, total, steps + 1)))
    head = np.repeat(samples[:1], degree - 1, axis=0)
    tail = np.repeat(samples[-1:], degree - 1, axis=0)
    return BSplineTrajectory(np.vstack([head, samples, tail]), config.dt, degree)


@dataclass(frozen=True)
class PlanResult:
    trajectory: BSplineTrajectory
    waypoints: np.ndarray
    distance: float
    t_g: float
    t_astar: float
    t_opt: float
    rerouted: bool
    iterations: int
    violations: list[Violation] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return not self.violations

    @property
    def length(self) -> float:
        return self.trajectory.length()

    def timings(self) -> dict[str, float]:
        return {"T_G": self.t_g, "T_Opt": self.t_opt, "T_A*": self.t_astar}


def _ms(since: float) -> float:
    return (time.perf_counter() - since) * 1000.0


def routing_grid(grid: VoxelGrid, margin: float) -> VoxelGrid:
    """Copy of ``grid`` with free space near obstacles marked as inflated."""
    if grid.count(VoxelState.OBSTACLE) == 0:
        return grid
    return inflate(grid.copy(), margin)


def segment_blocked(
    a: np.ndarray,
    b: np.ndarray,
    grid: VoxelGrid,
    obstacles: ObstacleIndex,
    margin: float,
    *,
    allow_unknown: bool,
) -> bool:
    """True when the segment passes within ``margin`` of an obstacle or, unless allowed, through unknown space."""
    length = float(np.linalg.norm(b - a))
    count = max(2, math.ceil(length / (0.5 * grid.resolution)) + 1)
    pts = a + np.linspace(0.0, 1.0, count)[:, None] * (b - a)
    dist, _ = obstacles.nearest(pts)
    if bool(np.any(dist <= margin)):
        return True
    if allow_unknown:
        return False
    return bool(np.any(grid.states(voxel_keys(pts, grid.resolution)) == UNKNOWN))


def plan_trajectory(
    start: np.ndarray,
    goal: np.ndarray,
    grid: VoxelGrid,
    config: PlannerConfig,
    *,
    allow_unknown: bool = False,
    routing: VoxelGrid | None = None,
    obstacles: ObstacleIndex | None = None,
) -> PlanResult:
    """Plan from ``start`` to ``goal``: straight line first, A* detour only when the line is blocked."""
    start = np.asarray(start, dtype=float).reshape(3)
    goal = np.asarray(goal, dtype=float).reshape(3)
    distance = float(np.linalg.norm(goal - start))
    obstacles = obstacles if obstacles is not None else ObstacleIndex(grid)

    t0 = time.perf_counter()
    waypoints = np.vstack([start, goal])
    traj = initial_path(waypoints, config)
    t_g = _ms(t0)

    t_astar = 0.0
    rerouted = False
    if segment_blocked(start, goal, grid, obstacles, config.routing_margin, allow_unknown=allow_unknown):
        t0 = time.perf_counter()
        routing = routing if routing is not None else routing_grid(grid, config.routing_margin)
        r = routing.resolution
        start_key, goal_key = point_key(start, r), point_key(goal, r)
        keys = astar(
            routing,
            start_key,
            goal_key,
            allow_unknown=allow_unknown,
            relax_endpoints=True,
            max_expansions=config.max_expansions,
        )
        centers = (np.asarray(keys, dtype=float) + 0.5) * r
        inner = centers[1:-1]
        waypoints = np.vstack([start, inner, goal]) if len(inner) else np.vstack([start, goal])
        if config.shortcut:
            bounds = _key_bounds(routing, (start_key, goal_key), 10)
            passable = passability(routing, allow_unknown=allow_unknown, bounds=bounds)
            waypoints = shortcut(waypoints, r, lambda k: passable(k) or k in (start_key, goal_key))
        traj = initial_path(waypoints, config)
        t_astar = _ms(t0)
        rerouted = True

    t0 = time.perf_counter()
    result = optimize(traj, grid, config.weights, max_iterations=config.max_iterations, obstacles=obstacles)
    t_opt = _ms(t0)
    trace.debug(f"plan D={distance:.3f} rerouted={rerouted} violations={len(result.violations)}")
    return PlanResult(result.trajectory, waypoints, distance, t_g, t_astar, t_opt, rerouted, result.iterations, result.violations)


@dataclass(frozen=True)
class BenchmarkScenario:
    name: str
    start: np.ndarray
    goal: np.ndarray
    grid: VoxelGrid
    weights: OptWeights | None = None


@dataclass(frozen=True)
class BenchmarkRow:
    name: str
    t_g: float
    t_opt: float
    t_astar: float
    distance: float
    length: float
    success: bool

    def as_row(self) -> tuple[object, ...]:
        return (self.name, self.t_g, self.t_opt, self.t_astar, self.distance, self.length, self.success)


BENCHMARK_HEADER = ("scenario", "T_G", "T_Opt", "T_A*", "D", "L_final", "success")


def _free_box(lo: tuple[float, float, float], hi: tuple[float, float, float], resolution: float) -> VoxelGrid:
    grid = VoxelGrid(resolution, (np.asarray(lo, float), np.asarray(hi, float)))
    klo = np.floor(np.asarray(lo) / resolution + 1e-9).astype(np.int64)
    khi = np.ceil(np.asarray(hi) / resolution - 1e-9).astype(np.int64) - 1
    axes = [np.arange(klo[k], khi[k] + 1) for k in range(3)]
    keys = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    grid.assign(keys, VoxelState.FREE)
    return grid


def _block(grid: VoxelGrid, lo: tuple[float, float, float], hi: tuple[float, float, float]) -> None:
    free = grid.keys(VoxelState.FREE)
    c = grid.center(free)
    inside = np.all((c >= np.asarray(lo)) & (c <= np.asarray(hi)), axis=1)
    grid.assign(free[inside], VoxelState.OBSTACLE)


def benchmark_scenarios(resolution: float = 0.2) -> list[BenchmarkScenario]:
    """Obstacle-free straight lines, a box inflated small and large, and two wall openings."""
    z = 1.5
    scenarios: list[BenchmarkScenario] = []
    for d in (2.0, 4.0, 6.0):
        grid = _free_box((-1.0, -4.0, 0.4), (7.0, 4.0, 2.6), resolution)
        scenarios.append(BenchmarkScenario(f"no_obstacle_{d:g}m", np.array([0.0, 0.0, z]), np.array([d, 0.0, z]), grid))
    for name, dilation in (("small_obstacle", 0.2), ("large_obstacle", 1.2)):
        grid = _free_box((-1.0, -4.0, 0.4), (7.0, 4.0, 2.6), resolution)
        _block(grid, (2.8 - dilation, -0.2 - dilation, 0.0), (3.2 + dilation, 0.2 + dilation, 3.0))
        scenarios.append(BenchmarkScenario(name, np.array([0.0, 0.0, z]), np.array([6.0, 0.0, z]), grid))
    narrow = OptWeights(safety_distance=0.4, clearance_margin=0.1)
    for gap in (2.0, 1.4):
        fine = 0.1
        grid = _free_box((0.0, -2.0, 0.6), (6.0, 2.0, 2.4), fine)
        free = grid.keys(VoxelState.FREE)
        c = grid.center(free)
        wall = (np.abs(c[:, 0] - 3.0) < 0.1 + 1e-9) & (np.abs(c[:, 1]) >= gap / 2.0)
        grid.assign(free[wall], VoxelState.OBSTACLE)
        scenarios.append(BenchmarkScenario(f"narrow_gap_{gap:g}m", np.array([0.5, 0.0, z]), np.array([5.5, 0.0, z]), grid, narrow))
    return scenarios


def run_benchmark(config: PlannerConfig, scenarios: list[BenchmarkScenario] | None = None) -> list[BenchmarkRow]:
    rows: list[BenchmarkRow] = []
    for sc in scenarios if scenarios is not None else benchmark_scenarios():
        cfg = config if sc.weights is None else config.model_copy(update={"weights": sc.weights})
        try:
            res = plan_trajectory(sc.start, sc.goal, sc.grid, cfg)
        except UnreachableError as exc:
            trace.warn(f"benchmark {sc.name}: {exc}")
            rows.append(BenchmarkRow(sc.name, 0.0, 0.0, 0.0, float(np.linalg.norm(sc.goal - sc.start)), 0.0, False))
            continue
        rows.append(BenchmarkRow(sc.name, res.t_g, res.t_opt, res.t_astar, res.distance, res.length, res.success))
    return rows


__all__ = [
    "BENCHMARK_HEADER",
    "NEIGHBORS",
    "BenchmarkRow",
    "BenchmarkScenario",
    "PlanResult",
    "PlannerConfig",
    "UnreachableError",
    "astar",
    "benchmark_scenarios",
    "initial_path",
    "line_of_sight",
    "passability",
    "point_key",
    "plan_trajectory",
    "routing_grid",
    "run_benchmark",
    "segment_blocked",
    "shortcut",
    "trapezoid_profile",
]
