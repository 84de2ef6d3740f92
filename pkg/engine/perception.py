"""Structure segmentation of a prior map into ground, roof, wall and column instances."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.ndimage import distance_transform_edt, map_coordinates
from scipy.optimize import least_squares
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import trace
from .geometry import DegenerateGeometryError, PointCloud


class StructureKind(Enum):
    GROUND = "ground"
    ROOF = "roof"
    COLUMN = "column"
    WALL = "wall"


@dataclass(frozen=True)
class Plane:
    a: float
    b: float
    c: float
    d: float
    inliers: np.ndarray

    def __post_init__(self) -> None:
        if abs(self.a**2 + self.b**2 + self.c**2 - 1.0) > 1e-9:
            raise ValueError("plane normal must have unit norm")
        object.__setattr__(self, "inliers", np.asarray(self.inliers, dtype=np.int64).reshape(-1))

    @classmethod
    def from_normal(cls, normal: np.ndarray, d: float, inliers: np.ndarray | list[int]) -> Plane:
        n = np.asarray(normal, dtype=float)
        norm = float(np.linalg.norm(n))
        if norm < 1e-12:
            raise DegenerateGeometryError("plane normal has zero length")
        n = n / norm
        return cls(float(n[0]), float(n[1]), float(n[2]), float(d) / norm, np.asarray(inliers, dtype=np.int64))

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal + self.d

    def flipped(self) -> Plane:
        return Plane(-self.a, -self.b, -self.c, -self.d, self.inliers)

    def with_inliers(self, inliers: np.ndarray) -> Plane:
        return Plane(self.a, self.b, self.c, self.d, inliers)

    def coefficients(self) -> list[float]:
        return [self.a, self.b, self.c, self.d]


@dataclass(frozen=True)
class ColumnAxis:
    center: np.ndarray
    z_min: float
    z_max: float
    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError("column radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(2))


@dataclass(frozen=True)
class StructureInstance:
    kind: StructureKind
    indices: np.ndarray
    plane: Plane | None = None
    column: ColumnAxis | None = None
    instance_id: str = ""

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            raise ValueError(f"{self.kind.value} instance has no points")
        object.__setattr__(self, "indices", idx)
        if self.kind is StructureKind.COLUMN and self.column is None:
            raise ValueError("column instance needs an axis")
        if self.kind is StructureKind.WALL and self.plane is None:
            raise ValueError("wall instance needs a plane")

    def __len__(self) -> int:
        return int(self.indices.size)

    def summary(self) -> dict[str, Any]:
        data: dict[str, Any] = {"id": self.instance_id, "kind": self.kind.value, "count": len(self)}
        if self.plane is not None:
            data["plane"] = [round(v, 9) for v in self.plane.coefficients()]
        if self.column is not None:
            data["center"] = [round(float(v), 9) for v in self.column.center]
            data["z_range"] = [round(self.column.z_min, 9), round(self.column.z_max, 9)]
            data["radius"] = round(self.column.radius, 9)
        return data


class CsfParams(BaseModel):
    """Cloth simulation settings for ground extraction."""

    cloth_resolution: float = Field(0.5, gt=0)
    mass: float = Field(1.0, gt=0)
    gravity: float = Field(0.2, gt=0)
    time_step: float = Field(0.65, gt=0)
    rigidness: int = Field(3, ge=1)
    spring: float = Field(0.5, gt=0, le=1)
    damping: float = Field(0.01, gt=0, lt=1)
    iterations: int = Field(500, ge=1)
    class_threshold: float = Field(0.15, gt=0)
    slope_smooth: bool = True
    smooth_threshold: float = Field(0.3, gt=0)
    normal_tol_deg: float = Field(30.0, gt=0, le=90)

    model_config = ConfigDict(extra="forbid")


class PerceptionConfig(BaseModel):
    csf: CsfParams = Field(default_factory=CsfParams)
    normal_neighbors: int = Field(10, ge=3)
    ransac_threshold: float = Field(0.05, gt=0)
    ransac_iterations: int = Field(200, ge=1)
    roof_angle_tol_deg: float = Field(10.0, gt=0, lt=90)
    cluster_threshold: float = Field(0.3, gt=0)
    aspect_max: float = Field(3.0, gt=0)
    footprint_max: float = Field(2.0, gt=0)
    height_fraction: float = Field(0.5, gt=0, le=1)
    wall_kappa: float = Field(1.0, ge=0)
    wall_min_inliers: int = Field(200, ge=3)
    wall_vertical_tol: float = Field(0.2, gt=0, lt=1)
    wall_normal_tol_deg: float = Field(30.0, gt=0, le=90)
    wall_min_width: float = Field(1.0, ge=0)
    max_walls: int = Field(32, ge=1)

    model_config = ConfigDict(extra="forbid")


def estimate_normals(points: np.ndarray, k: int = 10) -> np.ndarray:
    """Unit normals from the smallest principal axis of each point's k-neighbourhood."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise DegenerateGeometryError("need at least 3 points to estimate normals")
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    neigh = pts[idx]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def _normals_of(cloud: PointCloud, k: int) -> np.ndarray:
    return cloud.normals if cloud.normals is not None else estimate_normals(cloud.points, k)


def _check_spread(points: np.ndarray) -> None:
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] < 1e-9 * max(1.0, sv[0]):
        raise DegenerateGeometryError("points are collinear")


def _lsq_plane(points: np.ndarray) -> tuple[np.ndarray, float]:
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid)
    normal = vt[-1]
    return normal, float(-normal @ centroid)


def _canonical_sign(normal: np.ndarray) -> float:
    i = int(np.argmax(np.abs(normal)))
    return 1.0 if normal[i] >= 0 else -1.0


def fit_plane_ransac(
    points: np.ndarray,
    dist_thresh: float,
    *,
    iterations: int = 200,
    seed: int = 0,
    normals: np.ndarray | None = None,
    normal_tol_deg: float | None = None,
    orient_up: bool = False,
) -> Plane:
    """Plane with the largest consensus at ``dist_thresh``, refined over its inliers.

    With ``normals`` and ``normal_tol_deg`` a point only counts as inlier when its
    normal is within the tolerance of the candidate normal (either direction).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise DegenerateGeometryError("need at least 3 points to fit a plane")
    if dist_thresh <= 0:
        raise ValueError("dist_thresh must be positive")
    _check_spread(pts)
    cos_tol = None if normals is None or normal_tol_deg is None else float(np.cos(np.radians(normal_tol_deg)))

    def consensus(normal: np.ndarray, d: float) -> np.ndarray:
        mask = np.abs(pts @ normal + d) < dist_thresh
        if cos_tol is not None and normals is not None:
            mask &= np.abs(normals @ normal) >= cos_tol
        return mask

    if len(pts) == 3:
        normal, d = _lsq_plane(pts)
        best_mask = np.ones(3, dtype=bool)
    else:
        rng = np.random.default_rng(seed)
        samples = rng.integers(0, len(pts), size=(iterations, 3))
        p0, p1, p2 = pts[samples[:, 0]], pts[samples[:, 1]], pts[samples[:, 2]]
        cand = np.cross(p1 - p0, p2 - p0)
        norms = np.linalg.norm(cand, axis=1)
        valid = norms > 1e-12
        cand = cand[valid] / norms[valid, None]
        offsets = -np.einsum("ij,ij->i", cand, p0[valid])
        if len(cand) == 0:
            raise DegenerateGeometryError("no non-degenerate sample found")
        best_count = -1
        best_mask = np.zeros(len(pts), dtype=bool)
        for start in range(0, len(cand), 32):
            block_n = cand[start : start + 32]
            dist = np.abs(pts @ block_n.T + offsets[start : start + 32])
            mask = dist < dist_thresh
            if cos_tol is not None and normals is not None:
                mask &= np.abs(normals @ block_n.T) >= cos_tol
            counts = mask.sum(axis=0)
            j = int(np.argmax(counts))
            if counts[j] > best_count:
                best_count = int(counts[j])
                best_mask = mask[:, j]
        if best_mask.sum() < 3:
            raise DegenerateGeometryError("no plane with at least 3 inliers")
        normal, d = _lsq_plane(pts[best_mask])
        refined = consensus(normal, d)
        if refined.sum() >= 3:
            best_mask = refined
    sign = (1.0 if normal[2] >= 0 else -1.0) if orient_up else _canonical_sign(normal)
    return Plane.from_normal(sign * normal, sign * d, np.nonzero(best_mask)[0])


def _cloth_grid(xy: np.ndarray, res: float) -> tuple[np.ndarray, np.ndarray]:
    origin = xy.min(axis=0)
    shape = np.floor((xy.max(axis=0) - origin) / res + 0.5).astype(int) + 1
    return origin, shape


def extract_ground_csf(cloud: PointCloud, params: CsfParams | None = None, *, normal_neighbors: int = 10) -> StructureInstance:
    """Drop a cloth onto the inverted cloud and keep the points it rests on."""
    params = params or CsfParams()
    pts = cloud.points
    if len(pts) < 100:
        raise DegenerateGeometryError("cloud too small for ground extraction")
    _check_spread(pts)
    xy = pts[:, :2]
    res = params.cloth_resolution
    span = xy.max(axis=0) - xy.min(axis=0)
    if np.min(span) < res:
        raise DegenerateGeometryError("cloud has no horizontal extent")
    inv = -pts[:, 2]
    origin, shape = _cloth_grid(xy, res)
    cell = np.floor((xy - origin) / res + 0.5).astype(int)
    flat = cell[:, 0] * shape[1] + cell[:, 1]
    collide = np.full(shape[0] * shape[1], -np.inf)
    np.maximum.at(collide, flat, inv)
    collide = collide.reshape(shape)
    empty = ~np.isfinite(collide)
    if empty.any():
        _, nearest = distance_transform_edt(empty, return_indices=True)
        collide = collide[nearest[0], nearest[1]]

    height = np.full(shape, inv.max() + 0.05)
    previous = height.copy()
    fixed = np.zeros(shape, dtype=bool)
    step = params.gravity / params.mass * params.time_step**2
    iteration = 0
    for iteration in range(1, params.iterations + 1):
        movable = ~fixed
        moved = height + (height - previous) * (1.0 - params.damping) - step
        previous = height
        height = np.where(movable, moved, height)
        for _ in range(params.rigidness):
            padded = np.pad(height, 1, mode="edge")
            avg = 0.25 * (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:])
            height = np.where(movable, height + params.spring * (avg - height), height)
        hit = movable & (height <= collide)
        height = np.where(hit, collide, height)
        fixed |= hit
        if np.max(np.abs(height - previous)) < 1e-4:
            break
    if params.slope_smooth:
        height, fixed = _smooth_slopes(height, collide, fixed, params.smooth_threshold)
    trace.debug(f"csf grid {shape.tolist()} iterations {iteration} fixed {int(fixed.sum())}")

    coords = ((xy - origin) / res).T
    cloth_at = map_coordinates(height, coords, order=1, mode="nearest")
    near = np.abs(inv - cloth_at) < params.class_threshold
    normals = _normals_of(cloud, normal_neighbors)
    level = np.abs(normals[:, 2]) >= np.cos(np.radians(params.normal_tol_deg))
    indices = np.nonzero(near & level)[0]
    if indices.size == 0:
        raise DegenerateGeometryError("cloth did not settle on any points")
    normal, d = _lsq_plane(pts[indices])
    sign = 1.0 if normal[2] >= 0 else -1.0
    plane = Plane.from_normal(sign * normal, sign * d, indices)
    return StructureInstance(StructureKind.GROUND, indices, plane=plane, instance_id="ground")


def _smooth_slopes(height: np.ndarray, collide: np.ndarray, fixed: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Settle hanging particles next to resting ones when their gap is small."""
    height = height.copy()
    fixed = fixed.copy()
    while True:
        padded = np.pad(fixed, 1, constant_values=False)
        touching = padded[:-2, 1:-1] | padded[2:, 1:-1] | padded[1:-1, :-2] | padded[1:-1, 2:]
        settle = ~fixed & touching & (np.abs(height - collide) < threshold)
        if not settle.any():
            return height, fixed
        height[settle] = collide[settle]
        fixed |= settle


def extract_roof(
    cloud: PointCloud,
    ground_normal: np.ndarray,
    angle_tol_deg: float = 10.0,
    *,
    dist_thresh: float = 0.05,
    iterations: int = 200,
    seed: int = 0,
    normal_neighbors: int = 10,
    max_planes: int = 5,
) -> StructureInstance:
    """Highest plane whose interior-facing normal opposes the ground normal."""
    if len(cloud) < 3:
        raise ValueError("no roof")
    n_g = np.asarray(ground_normal, dtype=float)
    n_g = n_g / np.linalg.norm(n_g)
    cos_tol = float(np.cos(np.radians(angle_tol_deg)))
    normals = _normals_of(cloud, normal_neighbors)
    parallel = np.abs(normals @ n_g) >= cos_tol
    pool = np.nonzero(parallel)[0]
    centroid = cloud.points.mean(axis=0)
    best: tuple[float, Plane] | None = None
    for attempt in range(max_planes):
        if pool.size < 3:
            break
        try:
            plane = fit_plane_ransac(cloud.points[pool], dist_thresh, iterations=iterations, seed=seed + attempt)
        except DegenerateGeometryError:
            break
        members = pool[plane.inliers]
        side = float((centroid - cloud.points[members].mean(axis=0)) @ plane.normal)
        if abs(side) > 1e-6:
            plane = plane if side > 0 else plane.flipped()
        elif plane.normal @ n_g > 0:
            plane = plane.flipped()
        if plane.normal @ n_g <= -cos_tol:
            level = float(np.mean(cloud.points[members] @ n_g))
            if best is None or level > best[0]:
                best = (level, plane)
        pool = np.setdiff1d(pool, members)
    if best is None:
        raise ValueError("no roof")
    plane = best[1]
    members = np.nonzero((np.abs(plane.signed_distance(cloud.points)) < dist_thresh) & parallel)[0]
    trace.debug(f"roof plane {np.round(plane.coefficients(), 4).tolist()} points {members.size}")
    return StructureInstance(StructureKind.ROOF, members, plane=plane.with_inliers(members), instance_id="roof")


def cluster_euclidean(cloud: PointCloud | np.ndarray, d_thresh: float) -> list[np.ndarray]:
    """Connected components of the ``d_thresh`` proximity graph, ordered by smallest index."""
    if d_thresh <= 0:
        raise ValueError("d_thresh must be positive")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return []
    pairs = cKDTree(pts).query_pairs(d_thresh, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else coo_matrix((n, n))
    count, labels = connected_components(graph, directed=False)
    order = np.argsort(labels, kind="stable")
    splits = np.cumsum(np.bincount(labels, minlength=count))[:-1]
    clusters = np.split(order, splits)
    clusters.sort(key=lambda c: int(c[0]))
    return clusters


def _footprint(xy: np.ndarray) -> tuple[float, float]:
    centered = xy - xy.mean(axis=0)
    if len(xy) < 2:
        return 0.0, 0.0
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt.T
    extent = proj.max(axis=0) - proj.min(axis=0)
    if extent.size < 2:
        return float(extent[0]), 0.0
    return float(max(extent)), float(min(extent))


def classify_columns(
    cloud: PointCloud,
    clusters: list[np.ndarray],
    *,
    aspect_max: float = 3.0,
    footprint_max: float = 2.0,
    height_min: float | None = None,
    height_span: tuple[float, float] | None = None,
    height_fraction: float = 0.5,
) -> list[StructureInstance]:
    """Keep compact, tall clusters and summarise them as vertical axes."""
    if not clusters:
        return []
    if height_min is None:
        lo, hi = height_span if height_span is not None else (float(cloud.points[:, 2].min()), float(cloud.points[:, 2].max()))
        height_min = height_fraction * (hi - lo)
    columns: list[StructureInstance] = []
    for cluster in clusters:
        pts = cloud.points[cluster]
        z_lo, z_hi = float(pts[:, 2].min()), float(pts[:, 2].max())
        if z_hi - z_lo < height_min or len(pts) < 3:
            continue
        long_side, short_side = _footprint(pts[:, :2])
        if short_side <= 1e-9:
            continue
        if long_side / short_side > aspect_max or np.hypot(long_side, short_side) > footprint_max:
            continue
        center = pts[:, :2].mean(axis=0)
        radius = float(np.max(np.linalg.norm(pts[:, :2] - center, axis=1)))
        if radius <= 0:
            continue
        axis = ColumnAxis(center, z_lo, z_hi, radius)
        columns.append(StructureInstance(StructureKind.COLUMN, cluster, column=axis, instance_id=f"column_{len(columns):02d}"))
    return columns


def _spherical(normal: np.ndarray) -> tuple[float, float]:
    return float(np.arctan2(normal[1], normal[0])), float(np.arcsin(np.clip(normal[2], -1.0, 1.0)))


def _from_spherical(alpha: float, beta: float) -> np.ndarray:
    return np.array([np.cos(beta) * np.cos(alpha), np.cos(beta) * np.sin(alpha), np.sin(beta)])


def plane_objective(points: np.ndarray, plane: Plane) -> float:
    """Sum of squared point-plane distances."""
    return float(np.sum(plane.signed_distance(points) ** 2))


def refine_plane(points: np.ndarray, normals: np.ndarray, plane: Plane, kappa: float = 1.0) -> Plane:
    """Joint least squares of plane distances and the normal-agreement penalty."""
    pts = np.asarray(points, dtype=float)
    nrm = np.asarray(normals, dtype=float)
    flip = np.where(nrm @ plane.normal < 0, -1.0, 1.0)
    nrm = nrm * flip[:, None]
    weight = np.sqrt(kappa)

    def residuals(x: np.ndarray) -> np.ndarray:
        n = _from_spherical(x[0], x[1])
        dist = pts @ n + x[2]
        if weight == 0:
            return dist
        return np.concatenate([dist, weight * (1.0 - nrm @ n)])

    alpha, beta = _spherical(plane.normal)
    result = least_squares(residuals, np.array([alpha, beta, plane.d]), method="lm" if len(pts) >= 3 else "trf")
    n = _from_spherical(result.x[0], result.x[1])
    return Plane.from_normal(n, float(result.x[2]), plane.inliers)


def extract_wall_planes(
    cloud: PointCloud,
    *,
    dist_thresh: float = 0.05,
    kappa: float = 1.0,
    min_inliers: int = 200,
    vertical_tol: float = 0.2,
    normal_tol_deg: float = 30.0,
    min_width: float = 1.0,
    connect_thresh: float = 0.6,
    iterations: int = 200,
    seed: int = 0,
    normal_neighbors: int = 10,
    max_planes: int = 32,
) -> list[StructureInstance]:
    """Repeatedly fit normal-consistent vertical planes and peel their inliers off."""
    if len(cloud) < 3:
        return []
    normals = _normals_of(cloud, normal_neighbors)
    pts = cloud.points
    remaining = np.nonzero(np.abs(normals[:, 2]) < 0.5)[0]
    centroid = pts.mean(axis=0)
    cos_tol = float(np.cos(np.radians(normal_tol_deg)))
    walls: list[StructureInstance] = []
    for attempt in range(2 * max_planes):
        if len(walls) >= max_planes or remaining.size < max(min_inliers, 3):
            break
        try:
            candidate = fit_plane_ransac(
                pts[remaining],
                dist_thresh,
                iterations=iterations,
                seed=seed + attempt,
                normals=normals[remaining],
                normal_tol_deg=normal_tol_deg,
            )
        except DegenerateGeometryError:
            break
        seeds = remaining[candidate.inliers]
        plane = refine_plane(pts[seeds], normals[seeds], candidate.with_inliers(seeds), kappa)
        dist = np.abs(plane.signed_distance(pts[remaining]))
        agree = np.abs(normals[remaining] @ plane.normal) >= cos_tol
        members = remaining[(dist < dist_thresh) & agree]
        if members.size:
            largest = max(cluster_euclidean(pts[members], connect_thresh), key=len)
            members = members[np.sort(largest)]
        width = _plane_width(pts[members], plane.normal) if members.size else 0.0
        vertical = abs(plane.c) < vertical_tol
        if not vertical or members.size < min_inliers or width < min_width:
            trace.debug(f"wall candidate rejected vertical={vertical} inliers={members.size} width={width:.2f}")
            remaining = np.setdiff1d(remaining, np.union1d(seeds, members))
            continue
        mean_normal = normals[members].mean(axis=0) if cloud.normals is not None else centroid - pts[members].mean(axis=0)
        if float(mean_normal @ plane.normal) < 0:
            plane = plane.flipped()
        plane = plane.with_inliers(members)
        walls.append(StructureInstance(StructureKind.WALL, members, plane=plane, instance_id=f"wall_{len(walls):02d}"))
        remaining = np.setdiff1d(remaining, members)
    trace.debug(f"walls extracted {len(walls)}")
    return walls


def _plane_width(points: np.ndarray, normal: np.ndarray) -> float:
    u = np.cross(normal, [0.0, 0.0, 1.0])
    if np.linalg.norm(u) < 1e-9:
        return 0.0
    u = u / np.linalg.norm(u)
    proj = points @ u
    return float(proj.max() - proj.min())


def segment_structures(cloud: PointCloud, config: PerceptionConfig | None = None, *, seed: int = 0) -> list[StructureInstance]:
    """Ground, roof, walls and columns with pairwise disjoint point sets."""
    config = config or PerceptionConfig()
    if cloud.normals is None:
        cloud = cloud.with_normals(estimate_normals(cloud.points, config.normal_neighbors))
    h_lo, h_hi = float(cloud.points[:, 2].min()), float(cloud.points[:, 2].max())
    ground = extract_ground_csf(cloud, config.csf, normal_neighbors=config.normal_neighbors)
    instances: list[StructureInstance] = [ground]
    remaining = np.setdiff1d(np.arange(len(cloud)), ground.indices)
    n_g = ground.plane.normal if ground.plane is not None else np.array([0.0, 0.0, 1.0])

    rest = cloud.subset(remaining)
    try:
        roof = extract_roof(
            rest,
            n_g,
            config.roof_angle_tol_deg,
            dist_thresh=config.ransac_threshold,
            iterations=config.ransac_iterations,
            seed=seed,
        )
    except ValueError as exc:
        trace.warn(f"roof extraction failed: {exc}")
    else:
        mapped = remaining[roof.indices]
        plane = roof.plane.with_inliers(mapped) if roof.plane is not None else None
        instances.append(StructureInstance(StructureKind.ROOF, mapped, plane=plane, instance_id="roof"))
        remaining = np.setdiff1d(remaining, mapped)

    rest = cloud.subset(remaining)
    walls = extract_wall_planes(
        rest,
        dist_thresh=config.ransac_threshold,
        kappa=config.wall_kappa,
        min_inliers=config.wall_min_inliers,
        vertical_tol=config.wall_vertical_tol,
        normal_tol_deg=config.wall_normal_tol_deg,
        min_width=config.wall_min_width,
        connect_thresh=2 * config.cluster_threshold,
        iterations=config.ransac_iterations,
        seed=seed,
        max_planes=config.max_walls,
    )
    used = []
    for wall in walls:
        mapped = remaining[wall.indices]
        plane = wall.plane.with_inliers(mapped) if wall.plane is not None else None
        instances.append(StructureInstance(StructureKind.WALL, mapped, plane=plane, instance_id=wall.instance_id))
        used.append(mapped)
    if used:
        remaining = np.setdiff1d(remaining, np.concatenate(used))

    rest = cloud.subset(remaining)
    clusters = cluster_euclidean(rest, config.cluster_threshold)
    columns = classify_columns(
        rest,
        clusters,
        aspect_max=config.aspect_max,
        footprint_max=config.footprint_max,
        height_span=(h_lo, h_hi),
        height_fraction=config.height_fraction,
    )
    for column in columns:
        instances.append(StructureInstance(StructureKind.COLUMN, remaining[column.indices], column=column.column, instance_id=column.instance_id))
    trace.debug(f"segmented ground {len(ground)} walls {len(walls)} clusters {len(clusters)} columns {len(columns)}")
    return instances


__all__ = [
    "ColumnAxis",
    "CsfParams",
    "PerceptionConfig",
    "Plane",
    "StructureInstance",
    "StructureKind",
    "classify_columns",
    "cluster_euclidean",
    "estimate_normals",
    "extract_ground_csf",
    "extract_roof",
    "extract_wall_planes",
    "fit_plane_ransac",
    "plane_objective",
    "refine_plane",
    "segment_structures",
]
