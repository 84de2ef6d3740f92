"""Synthetic indoor facility: labelled surface samples and the matching occupancy world."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import trace
from .geometry import PointCloud
from .lidar import SimWorld

GROUND_LABEL = 0
ROOF_LABEL = 1000
WALL_LABEL = 2000
COLUMN_LABEL = 3000


class WallSegment(BaseModel):
    """Vertical wall from ``start`` to ``end`` (x, y); its left-hand normal faces the interior."""

    start: tuple[float, float]
    end: tuple[float, float]

    model_config = ConfigDict(extra="forbid")

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)

    def direction(self) -> np.ndarray:
        d = np.subtract(self.end, self.start).astype(float)
        return d / np.linalg.norm(d)

    def normal(self) -> np.ndarray:
        d = self.direction()
        return np.array([-d[1], d[0], 0.0])


class FacilitySpec(BaseModel):
    length: float = Field(20.0, gt=0)
    width: float = Field(12.0, gt=0)
    height: float = Field(4.0, gt=0)
    column_rows: int = Field(2, ge=0)
    column_cols: int = Field(3, ge=0)
    column_radius: float = Field(0.3, gt=0)
    perimeter_walls: bool = True
    walls: list[WallSegment] = Field(default_factory=list)
    point_spacing: float = Field(0.1, gt=0)
    noise: float = Field(0.0, ge=0)
    world_resolution: float = Field(0.1, gt=0)
    seed: int = 0

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _segments_have_length(self) -> FacilitySpec:
        for seg in self.walls:
            if seg.length <= 0:
                raise ValueError(f"wall segment {seg.start} -> {seg.end} has zero length")
        return self

    @property
    def column_count(self) -> int:
        return self.column_rows * self.column_cols

    @property
    def column_spacing(self) -> float:
        """Smallest distance between neighbouring column centres."""
        gaps = []
        if self.column_cols > 1:
            gaps.append(self.length / (self.column_cols + 1))
        if self.column_rows > 1:
            gaps.append(self.width / (self.column_rows + 1))
        return min(gaps) if gaps else min(self.length, self.width)

    def column_centers(self) -> np.ndarray:
        xs = self.length * np.arange(1, self.column_cols + 1) / (self.column_cols + 1)
        ys = self.width * np.arange(1, self.column_rows + 1) / (self.column_rows + 1)
        if not len(xs) or not len(ys):
            return np.zeros((0, 2))
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def wall_segments(self) -> list[WallSegment]:
        segs: list[WallSegment] = []
        if self.perimeter_walls:
            corners = [(0.0, 0.0), (self.length, 0.0), (self.length, self.width), (0.0, self.width)]
            segs += [WallSegment(start=corners[i], end=corners[(i + 1) % 4]) for i in range(4)]
        return segs + list(self.walls)


class Facility(NamedTuple):
    cloud: PointCloud
    world: SimWorld
    spec: FacilitySpec


def _count(area: float, spacing: float) -> int:
    return max(1, math.ceil(area / spacing**2))


def _outside_columns(xy: np.ndarray, centers: np.ndarray, radius: float) -> np.ndarray:
    if not len(centers):
        return np.ones(len(xy), dtype=bool)
    d = np.linalg.norm(xy[:, None, :] - centers[None, :, :], axis=2)
    return np.all(d > radius, axis=1)


def _horizontal(spec: FacilitySpec, rng: np.random.Generator, z: float, normal_z: float, label: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = _count(spec.length * spec.width, spec.point_spacing)
    xy = rng.uniform([0.0, 0.0], [spec.length, spec.width], size=(n, 2))
    xy = xy[_outside_columns(xy, spec.column_centers(), spec.column_radius)]
    pts = np.column_stack([xy, np.full(len(xy), z)])
    normals = np.tile([0.0, 0.0, normal_z], (len(pts), 1))
    return pts, normals, np.full(len(pts), label, dtype=np.int64)


def _wall(spec: FacilitySpec, rng: np.random.Generator, seg: WallSegment, label: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = _count(seg.length * spec.height, spec.point_spacing)
    t = rng.uniform(0.0, seg.length, n)
    z = rng.uniform(0.0, spec.height, n)
    xy = np.asarray(seg.start) + t[:, None] * seg.direction()
    pts = np.column_stack([xy, z])
    return pts, np.tile(seg.normal(), (n, 1)), np.full(n, label, dtype=np.int64)


def _column(spec: FacilitySpec, rng: np.random.Generator, center: np.ndarray, label: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = spec.column_radius
    n = _count(2.0 * math.pi * r * spec.height, spec.point_spacing)
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    z = rng.uniform(0.0, spec.height, n)
    radial = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(n)])
    pts = np.column_stack([center + r * radial[:, :2], z])
    return pts, radial, np.full(n, label, dtype=np.int64)


def voxelize(spec: FacilitySpec) -> SimWorld:
    """Occupancy of the floor and roof slabs, the wall slabs behind each face and the solid columns."""
    r = spec.world_resolution
    lo = np.floor(np.array([-2 * r, -2 * r, -2 * r]) / r).astype(np.int64)
    hi = np.ceil(np.array([spec.length + 2 * r, spec.width + 2 * r, spec.height + 2 * r]) / r).astype(np.int64)
    shape = tuple((hi - lo).tolist())
    axes = [(np.arange(lo[k], hi[k]) + 0.5) * r for k in range(3)]
    cx, cy, cz = np.meshgrid(*axes, indexing="ij")
    half = 0.5 * r
    occ = (cz <= half) & (cz >= -2 * r)
    occ |= (cz >= spec.height - half) & (cz <= spec.height + 2 * r)
    for seg in spec.wall_segments():
        d = seg.direction()
        nrm = seg.normal()
        rx, ry = cx - seg.start[0], cy - seg.start[1]
        along = rx * d[0] + ry * d[1]
        depth = rx * nrm[0] + ry * nrm[1]
        occ |= (along >= -half) & (along <= seg.length + half) & (depth <= half) & (depth >= -2 * r)
    for center in spec.column_centers():
        radial = np.hypot(cx - center[0], cy - center[1])
        occ |= radial <= spec.column_radius + half
    return SimWorld(occ.reshape(shape), lo, r)


def gen_facility(spec: FacilitySpec) -> Facility:
    """Sample every surface with its true normal and instance label, then voxelize the scene."""
    rng = np.random.default_rng(spec.seed)
    parts = [_horizontal(spec, rng, 0.0, 1.0, GROUND_LABEL), _horizontal(spec, rng, spec.height, -1.0, ROOF_LABEL)]
    for i, seg in enumerate(spec.wall_segments()):
        parts.append(_wall(spec, rng, seg, WALL_LABEL + i))
    for i, center in enumerate(spec.column_centers()):
        parts.append(_column(spec, rng, center, COLUMN_LABEL + i))
    points = np.concatenate([p[0] for p in parts])
    normals = np.concatenate([p[1] for p in parts])
    labels = np.concatenate([p[2] for p in parts])
    if spec.noise > 0:
        points = points + rng.normal(0.0, spec.noise, points.shape)
    world = voxelize(spec)
    trace.debug(f"facility {spec.length:g}x{spec.width:g}x{spec.height:g} points {len(points)} columns {spec.column_count}")
    return Facility(PointCloud(points, normals, labels), world, spec)


def is_column(labels: np.ndarray) -> np.ndarray:
    return labels >= COLUMN_LABEL


def is_wall(labels: np.ndarray) -> np.ndarray:
    return (labels >= WALL_LABEL) & (labels < COLUMN_LABEL)


__all__ = [
    "COLUMN_LABEL",
    "GROUND_LABEL",
    "ROOF_LABEL",
    "WALL_LABEL",
    "Facility",
    "FacilitySpec",
    "WallSegment",
    "gen_facility",
    "is_column",
    "is_wall",
    "voxelize",
]
