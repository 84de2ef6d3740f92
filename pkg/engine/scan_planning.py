"""Camera-footprint-driven scan paths: spirals around columns and coverage sweeps along walls."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial import ConvexHull, QhullError

from . import trace
from .geometry import PointCloud, VoxelGrid, VoxelState
from .perception import ColumnAxis, StructureInstance, StructureKind

OBSTACLE_VALUE = -1000.0
VISITED_VALUE = 0.0

# 0°, 45°, ..., 315° with i as the first and j as the second axis.
DIRECTIONS: tuple[tuple[int, int], ...] = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))


class CameraModel(BaseModel):
    fx: float = Field(600.0, gt=0)
    fy: float = Field(600.0, gt=0)
    cx: float = Field(320.0, gt=0)
    cy: float = Field(240.0, gt=0)
    distance: float = Field(1.5, gt=0)

    model_config = ConfigDict(extra="forbid")


class FieldOfView(NamedTuple):
    theta_x: float
    theta_y: float
    width: float
    height: float


def compute_fov(cam: CameraModel) -> FieldOfView:
    theta_x = 2.0 * math.atan(cam.cx / cam.fx)
    theta_y = 2.0 * math.atan(cam.cy / cam.fy)
    width = 2.0 * cam.distance * math.tan(theta_x / 2.0)
    height = 2.0 * cam.distance * math.tan(theta_y / 2.0)
    return FieldOfView(theta_x, theta_y, width, height)


@dataclass(frozen=True)
class ScanPath:
    """Ordered capture waypoints with the yaw the camera faces at each."""

    positions: np.ndarray
    yaws: np.ndarray
    instance_id: str = ""
    kind: str = "coverage"
    center: np.ndarray | None = None
    meta: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        yaw = np.asarray(self.yaws, dtype=float).reshape(-1)
        if len(pos) < 2:
            raise ValueError(f"scan path needs at least two waypoints, got {len(pos)}")
        if len(yaw) != len(pos):
            raise ValueError("one yaw per waypoint required")
        if self.kind not in ("spiral", "coverage", "reference"):
            raise ValueError(f"unknown scan path kind '{self.kind}'")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "yaws", yaw)
        if self.center is not None:
            object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(2))

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))

    def replace(self, positions: np.ndarray, yaws: np.ndarray) -> ScanPath:
        return ScanPath(positions, yaws, self.instance_id, self.kind, self.center, dict(self.meta))

    def densify(self, step: float) -> np.ndarray:
        """Points along the path no further than ``step`` apart (helical between spiral waypoints)."""
        if step <= 0:
            raise ValueError("step must be positive")
        out = [self.positions[:1]]
        for a, b in zip(self.positions[:-1], self.positions[1:], strict=True):
            if self.kind == "spiral" and self.center is not None:
                out.append(_helix_segment(a, b, self.center, step))
            else:
                count = max(1, math.ceil(float(np.linalg.norm(b - a)) / step))
                t = np.linspace(0.0, 1.0, count + 1)[1:, None]
                out.append(a + t * (b - a))
        return np.concatenate(out, axis=0)


def _helix_segment(a: np.ndarray, b: np.ndarray, center: np.ndarray, step: float) -> np.ndarray:
    ra, rb = a[:2] - center, b[:2] - center
    th_a = math.atan2(ra[1], ra[0])
    dth = math.atan2(rb[1], rb[0]) - th_a
    dth = (dth + math.pi) % (2 * math.pi) - math.pi
    rad_a, rad_b = float(np.linalg.norm(ra)), float(np.linalg.norm(rb))
    arc = abs(dth) * max(rad_a, rad_b) + abs(b[2] - a[2])
    count = max(1, math.ceil(arc / step))
    t = np.linspace(0.0, 1.0, count + 1)[1:]
    th = th_a + t * dth
    rad = rad_a + t * (rad_b - rad_a)
    return np.column_stack([center[0] + rad * np.cos(th), center[1] + rad * np.sin(th), a[2] + t * (b[2] - a[2])])


def gen_spiral_path(
    column: ColumnAxis | StructureInstance,
    cam: CameraModel,
    h_min: float,
    h_max: float,
    *,
    end_laps: bool = False,
    instance_id: str = "",
) -> ScanPath:
    """Helix of capture poses around a column, each facing its axis."""
    axis = column.column if isinstance(column, StructureInstance) else column
    if axis is None:
        raise ValueError("spiral path needs a column instance")
    if not h_max > h_min:
        raise ValueError("h_max must exceed h_min")
    if axis.radius <= 0:
        raise ValueError("column radius must be positive")
    fov = compute_fov(cam)
    r_spiral = axis.radius + cam.distance
    m = max(1, math.ceil(2.0 * math.pi * axis.radius / fov.width))
    span = h_max - h_min
    if fov.height >= span:
        n = 1
        idx = np.arange(m + 1)
        z = np.full(idx.shape, 0.5 * (h_min + h_max))
    else:
        n = math.ceil(span / fov.height)
        idx = np.arange(m * n + 1)
        z = h_min + span * idx / (m * n)
    theta = 2.0 * math.pi * idx / m
    if end_laps and n > 1:
        lap = 2.0 * math.pi * np.arange(m) / m
        theta = np.concatenate([lap, theta, 2.0 * math.pi * n + lap[1:], [2.0 * math.pi * (n + 1)]])
        z = np.concatenate([np.full(m, h_min), z, np.full(m, h_max)])
    cx, cy = axis.center
    x = cx + r_spiral * np.cos(theta)
    y = cy + r_spiral * np.sin(theta)
    yaw = np.arctan2(cy - y, cx - x)
    meta = {"m": float(m), "n": float(n), "r_spiral": r_spiral, "h_min": h_min, "h_max": h_max, "radius": axis.radius}
    return ScanPath(np.column_stack([x, y, z]), yaw, instance_id, "spiral", np.array([cx, cy]), meta)


@dataclass(frozen=True)
class BoundingGridMap:
    """Cell values over a wall's minimum bounding rectangle, lifted onto the offset plane.

    ``values[i, j]`` is ``50 / (j + 1)`` for free cells and ``OBSTACLE_VALUE`` for blocked ones.
    """

    values: np.ndarray
    cell: float
    corner: np.ndarray
    axis_i: np.ndarray
    axis_j: np.ndarray
    normal: np.ndarray
    wall_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])

    def cell_center(self, i: int, j: int) -> np.ndarray:
        return self.corner + (i + 0.5) * self.cell * self.axis_i + (j + 0.5) * self.cell * self.axis_j

    def locate(self, point: np.ndarray) -> tuple[int, int]:
        rel = np.asarray(point, dtype=float) - self.corner
        return int(math.floor(rel @ self.axis_i / self.cell)), int(math.floor(rel @ self.axis_j / self.cell))

    def free_cells(self) -> int:
        return int(np.count_nonzero(self.values != OBSTACLE_VALUE))


def initialize_map(n_i: int, n_j: int, blocked: np.ndarray | None = None) -> np.ndarray:
    values = np.tile(50.0 / np.arange(1, n_j + 1, dtype=float), (n_i, 1))
    if blocked is not None:
        values[blocked] = OBSTACLE_VALUE
    return values


def _min_area_rectangle(q: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Rotating calipers over the hull; returns angle, rectangle min corner and extent."""
    try:
        hull = q[ConvexHull(q).vertices]
    except QhullError:
        hull = q
    best: tuple[float, float, np.ndarray, np.ndarray] | None = None
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2)
    for angle in np.unique(np.concatenate([[0.0], np.round(angles, 12)])):
        rot = np.array([[math.cos(angle), math.sin(angle)], [-math.sin(angle), math.cos(angle)]])
        local = q @ rot.T
        lo, hi = local.min(axis=0), local.max(axis=0)
        area = float(np.prod(hi - lo))
        if best is None or area < best[0] - 1e-9:
            best = (area, float(angle), lo, hi - lo)
    assert best is not None
    return best[1], best[2], best[3]


def choose_free_side(
    normal: np.ndarray,
    wall_points: np.ndarray,
    distance: float,
    *,
    grid: VoxelGrid | None = None,
    map_centroid: np.ndarray | None = None,
) -> np.ndarray:
    """Unit normal pointing to the side of the wall the camera should stand on."""
    n = np.asarray(normal, dtype=float)
    if grid is not None:
        sample = wall_points[:: max(1, len(wall_points) // 64)]
        counts = []
        for sign in (1.0, -1.0):
            offset_point = sample + sign * distance * n
            keys = np.floor(offset_point / grid.resolution).astype(np.int64)
            counts.append(int(np.count_nonzero(grid.states(keys) == VoxelState.FREE)))
        if counts[0] != counts[1]:
            return n if counts[0] > counts[1] else -n
    if map_centroid is not None:
        toward = np.asarray(map_centroid, dtype=float) - wall_points.mean(axis=0)
        if float(toward @ n) < 0:
            return -n
    return n


def project_wall(
    wall: StructureInstance,
    cloud: PointCloud,
    cam: CameraModel,
    *,
    grid: VoxelGrid | None = None,
    map_centroid: np.ndarray | None = None,
    mark_empty_cells: bool = True,
) -> BoundingGridMap:
    """Rasterise the wall's minimum bounding rectangle on the plane offset by the shooting distance."""
    if wall.kind is not StructureKind.WALL or wall.plane is None:
        raise ValueError("project_wall needs a wall instance with a plane")
    pts = cloud.points[wall.indices]
    if len(pts) < 3:
        raise ValueError("wall has fewer than 3 inliers")
    normal = choose_free_side(wall.plane.normal, pts, cam.distance, grid=grid, map_centroid=map_centroid)
    u = np.cross(normal, [0.0, 0.0, 1.0])
    if np.linalg.norm(u) < 1e-9:
        u = np.cross(normal, [1.0, 0.0, 0.0])
    u = u / np.linalg.norm(u)
    v = np.cross(u, normal)
    on_plane = pts - np.outer(wall.plane.signed_distance(pts), wall.plane.normal)
    origin = on_plane.mean(axis=0)
    q = np.column_stack([(on_plane - origin) @ u, (on_plane - origin) @ v])
    angle, lo, extent = _min_area_rectangle(q)
    e1 = math.cos(angle) * u + math.sin(angle) * v
    e2 = -math.sin(angle) * u + math.cos(angle) * v
    fov = compute_fov(cam)
    cell = min(fov.width, fov.height)
    n_i = max(1, math.ceil(extent[0] / cell - 1e-9))
    n_j = max(1, math.ceil(extent[1] / cell - 1e-9))
    corner = origin + lo[0] * e1 + lo[1] * e2 + cam.distance * normal

    blocked = np.zeros((n_i, n_j), dtype=bool)
    if mark_empty_cells:
        rel = on_plane + cam.distance * normal - corner
        ci = np.clip(np.floor(rel @ e1 / cell).astype(int), 0, n_i - 1)
        cj = np.clip(np.floor(rel @ e2 / cell).astype(int), 0, n_j - 1)
        occupied = np.zeros((n_i, n_j), dtype=bool)
        occupied[ci, cj] = True
        blocked |= ~occupied
    grid_map = BoundingGridMap(np.zeros((n_i, n_j)), cell, corner, e1, e2, normal, wall.instance_id)
    if grid is not None:
        centers = np.array([grid_map.cell_center(i, j) for i in range(n_i) for j in range(n_j)])
        states = grid.states(np.floor(centers / grid.resolution).astype(np.int64)).reshape(n_i, n_j)
        blocked |= (states == VoxelState.OBSTACLE) | (states == VoxelState.INFLATED)
    values = initialize_map(n_i, n_j, blocked)
    trace.debug(f"wall {wall.instance_id} grid {n_i}x{n_j} cell {cell:.3f} blocked {int(blocked.sum())}")
    return BoundingGridMap(values, cell, corner, e1, e2, normal, wall.instance_id)


def _bfs_to_unvisited(values: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]] | None:
    """Shortest 8-connected route through free cells to the nearest unvisited one (start excluded)."""
    n_i, n_j = values.shape
    parent: dict[tuple[int, int], tuple[int, int] | None] = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if cur != start and values[cur] > VISITED_VALUE:
            route = []
            node: tuple[int, int] | None = cur
            while node is not None and node != start:
                route.append(node)
                node = parent[node]
            return route[::-1]
        for di, dj in DIRECTIONS:
            nxt = (cur[0] + di, cur[1] + dj)
            if 0 <= nxt[0] < n_i and 0 <= nxt[1] < n_j and nxt not in parent and values[nxt] != OBSTACLE_VALUE:
                parent[nxt] = cur
                queue.append(nxt)
    return None


def ccpp(grid_map: BoundingGridMap | np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Greedy highest-value coverage walk with breadth-first escapes from dead ends."""
    values = np.array(grid_map.values if isinstance(grid_map, BoundingGridMap) else grid_map, dtype=float)
    n_i, n_j = values.shape
    cur = (int(start[0]), int(start[1]))
    if not (0 <= cur[0] < n_i and 0 <= cur[1] < n_j):
        raise ValueError(f"start cell {cur} outside the grid")
    if values[cur] == OBSTACLE_VALUE:
        raise ValueError("start cell is an obstacle")
    path = [cur]
    values[cur] = VISITED_VALUE
    remaining = int(np.count_nonzero(values > VISITED_VALUE))
    jumps = 0
    while remaining > 0:
        best: tuple[float, int, int] | None = None
        best_cell: tuple[int, int] | None = None
        for k, (di, dj) in enumerate(DIRECTIONS):
            nxt = (cur[0] + di, cur[1] + dj)
            if not (0 <= nxt[0] < n_i and 0 <= nxt[1] < n_j) or values[nxt] <= VISITED_VALUE:
                continue
            key = (-float(values[nxt]), int(di != 0 and dj != 0), k)
            if best is None or key < best:
                best, best_cell = key, nxt
        if best_cell is not None:
            cur = best_cell
            path.append(cur)
        else:
            route = _bfs_to_unvisited(values, cur)
            if route is None:
                pending = np.argwhere(values > VISITED_VALUE)
                dist = np.hypot(pending[:, 0] - cur[0], pending[:, 1] - cur[1])
                target = pending[int(np.argmin(dist))]
                route = [(int(target[0]), int(target[1]))]
                jumps += 1
            path.extend(route)
            cur = route[-1]
        if values[cur] > VISITED_VALUE:
            remaining -= 1
        values[cur] = VISITED_VALUE
    if jumps:
        trace.debug(f"ccpp jumped {jumps} times between disconnected regions")
    return path


def grid_path_to_waypoints(path: list[tuple[int, int]], grid_map: BoundingGridMap, *, instance_id: str = "") -> ScanPath:
    """Cell centres on the offset plane; the camera faces the wall."""
    if not path:
        raise ValueError("empty cell path")
    positions = np.array([grid_map.cell_center(i, j) for i, j in path])
    facing = -grid_map.normal
    yaw = math.atan2(facing[1], facing[0])
    return ScanPath(positions, np.full(len(positions), yaw), instance_id or grid_map.wall_id, "coverage")


class PlanningConfig(BaseModel):
    camera: CameraModel = Field(default_factory=CameraModel)
    clearance: float = Field(0.8, ge=0)
    spiral_end_laps: bool = True
    mark_empty_cells: bool = True

    model_config = ConfigDict(extra="forbid")


def flight_band(floor_z: float, roof_z: float, clearance: float) -> tuple[float, float]:
    lo, hi = floor_z + clearance, roof_z - clearance
    if not hi > lo:
        raise ValueError(f"flight band is empty between {floor_z:g} and {roof_z:g} with clearance {clearance:g}")
    return lo, hi


def _clamp_heights(path: ScanPath, lo: float, hi: float) -> ScanPath:
    pos = path.positions.copy()
    pos[:, 2] = np.clip(pos[:, 2], lo, hi)
    keep = np.ones(len(pos), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pos, axis=0), axis=1) > 1e-9
    return path.replace(pos[keep], path.yaws[keep])


def plan_scan_paths(
    instances: list[StructureInstance],
    cloud: PointCloud,
    config: PlanningConfig,
    *,
    band: tuple[float, float],
    grid: VoxelGrid | None = None,
) -> dict[str, ScanPath]:
    """Scan path per column and wall instance, keyed by instance id."""
    centroid = cloud.points.mean(axis=0)
    paths: dict[str, ScanPath] = {}
    for inst in instances:
        if inst.kind is StructureKind.COLUMN and inst.column is not None:
            lo = max(band[0], inst.column.z_min)
            hi = min(band[1], inst.column.z_max)
            if not hi > lo:
                lo, hi = band
            paths[inst.instance_id] = gen_spiral_path(inst, config.camera, lo, hi, end_laps=config.spiral_end_laps, instance_id=inst.instance_id)
        elif inst.kind is StructureKind.WALL:
            grid_map = project_wall(inst, cloud, config.camera, grid=grid, map_centroid=centroid, mark_empty_cells=config.mark_empty_cells)
            free = np.argwhere(grid_map.values != OBSTACLE_VALUE)
            if len(free) == 0:
                trace.warn(f"wall {inst.instance_id} has no free cells")
                continue
            start = (int(free[0][0]), int(free[0][1]))
            cells = ccpp(grid_map, start)
            try:
                path = _clamp_heights(grid_path_to_waypoints(cells, grid_map, instance_id=inst.instance_id), band[0], band[1])
            except ValueError as exc:
                trace.warn(f"wall {inst.instance_id} skipped: {exc}")
                continue
            paths[inst.instance_id] = path
    trace.debug(f"planned {len(paths)} scan paths")
    return paths


__all__ = [
    "DIRECTIONS",
    "OBSTACLE_VALUE",
    "BoundingGridMap",
    "CameraModel",
    "FieldOfView",
    "PlanningConfig",
    "ScanPath",
    "ccpp",
    "choose_free_side",
    "compute_fov",
    "flight_band",
    "gen_spiral_path",
    "grid_path_to_waypoints",
    "initialize_map",
    "plan_scan_paths",
    "project_wall",
]
