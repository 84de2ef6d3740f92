"""Point clouds, poses and the hash-indexed voxel occupancy map."""

from __future__ import annotations

import threading
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial.transform import Rotation

from . import trace

# Hash multipliers for voxel buckets.
N_X = 73856093
N_Y = 83492791


class VoxelState(IntEnum):
    FREE = 0
    OBSTACLE = 1
    INFLATED = 2


UNKNOWN = -1


class DegenerateGeometryError(ValueError):
    """Input geometry is too small or degenerate for the requested fit."""


def _as_points(values: np.ndarray | list, name: str = "points") -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        pts = _as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _as_points(self.normals, "normals")
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points 1:1")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must have unit norm")
            object.__setattr__(self, "normals", nrm)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise ValueError("labels must match points 1:1")
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def subset(self, indices: np.ndarray | list[int]) -> PointCloud:
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.labels is None else self.labels[idx],
        )

    def with_normals(self, normals: np.ndarray) -> PointCloud:
        return PointCloud(self.points, normals, self.labels)

    def transformed(self, pose: Pose) -> PointCloud:
        normals = None if self.normals is None else self.normals @ pose.rotation.T
        return PointCloud(pose.apply(self.points), normals, self.labels)

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise DegenerateGeometryError("empty cloud has no centroid")
        return self.points.mean(axis=0)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def so3_exp(rotvec: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix()


def so3_log(rotation: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(rotation).as_rotvec()


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3) at ``phi``."""
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    return np.eye(3) - (1.0 - np.cos(theta)) / theta**2 * k + (theta - np.sin(theta)) / theta**3 * (k @ k)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_rotvec(cls, rotvec: np.ndarray | list[float], translation: np.ndarray | list[float]) -> Pose:
        return cls(so3_exp(np.asarray(rotvec, dtype=float)), np.asarray(translation, dtype=float))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: Pose) -> Pose:
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(so3_log(self.rotation)))


def voxel_keys(points: np.ndarray, resolution: float) -> np.ndarray:
    """Integer triples ``floor(p / r)`` for every row of ``points``."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    pts = _as_points(points)
    if not np.all(np.isfinite(pts)):
        raise ValueError("voxel index of a non-finite point")
    return np.floor(pts / resolution).astype(np.int64)


def hash_keys(keys: np.ndarray) -> np.ndarray:
    """Bucket hash ``Lx + Ly*nx + Lz*nx*ny`` with wrapping int64 arithmetic."""
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    with np.errstate(over="ignore"):
        return k[:, 0] + k[:, 1] * np.int64(N_X) + k[:, 2] * (np.int64(N_X) * np.int64(N_Y))


_WRAP = 1 << 64
_HALF = 1 << 63


def hash_key(key: tuple[int, int, int]) -> int:
    """Scalar form of :func:`hash_keys`, wrapped to signed 64 bits."""
    h = key[0] + key[1] * N_X + key[2] * N_X * N_Y
    return (h + _HALF) % _WRAP - _HALF


def voxel_index(p: np.ndarray | list[float], r: float) -> tuple[tuple[int, int, int], int]:
    key = voxel_keys(np.asarray(p, dtype=float).reshape(1, 3), r)
    triple = (int(key[0, 0]), int(key[0, 1]), int(key[0, 2]))
    return triple, int(hash_keys(key)[0])


Key = tuple[int, int, int]


class VoxelGrid:
    """Hash map from voxel triple to state; the multiplicative hash only selects the bucket."""

    def __init__(
        self,
        resolution: float = 0.1,
        bounds: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> None:
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = float(resolution)
        self.bounds = None if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
        self._buckets: dict[int, dict[Key, int]] = {}
        self._size = 0
        self._lock = threading.RLock()

    @contextmanager
    def writing(self) -> Iterator[VoxelGrid]:
        with self._lock:
            yield self

    def __len__(self) -> int:
        return self._size

    def __contains__(self, key: Key) -> bool:
        return self.get(key) is not None

    def get(self, key: Key) -> int | None:
        k = (int(key[0]), int(key[1]), int(key[2]))
        with self._lock:
            bucket = self._buckets.get(hash_key(k))
            return None if bucket is None else bucket.get(k)

    def set(self, key: Key, state: int) -> None:
        if state not in (VoxelState.FREE, VoxelState.OBSTACLE, VoxelState.INFLATED):
            raise ValueError(f"invalid voxel state {state}")
        k = (int(key[0]), int(key[1]), int(key[2]))
        h = hash_key(k)
        with self._lock:
            bucket = self._buckets.setdefault(h, {})
            if k not in bucket:
                self._size += 1
            bucket[k] = int(state)

    def state_at(self, point: np.ndarray | list[float]) -> int:
        key, _ = voxel_index(point, self.resolution)
        state = self.get(key)
        return UNKNOWN if state is None else state

    def states(self, keys: np.ndarray) -> np.ndarray:
        """States for an (M, 3) key array; unknown voxels report ``UNKNOWN``."""
        k = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(k), UNKNOWN, dtype=np.int8)
        hashes = hash_keys(k)
        with self._lock:
            for i, (h, row) in enumerate(zip(hashes.tolist(), k.tolist(), strict=True)):
                bucket = self._buckets.get(h)
                if bucket is not None:
                    state = bucket.get((row[0], row[1], row[2]))
                    if state is not None:
                        out[i] = state
        return out

    def assign(self, keys: np.ndarray, state: int, *, protect: tuple[int, ...] = ()) -> int:
        """Set every key to ``state`` unless its current state is in ``protect``."""
        k = np.unique(np.asarray(keys, dtype=np.int64).reshape(-1, 3), axis=0)
        hashes = hash_keys(k)
        changed = 0
        with self._lock:
            for h, row in zip(hashes.tolist(), k.tolist(), strict=True):
                key = (row[0], row[1], row[2])
                bucket = self._buckets.setdefault(h, {})
                current = bucket.get(key)
                if current is not None and current in protect:
                    continue
                if current is None:
                    self._size += 1
                if current != state:
                    changed += 1
                bucket[key] = int(state)
        return changed

    def items(self) -> Iterator[tuple[Key, int]]:
        """Snapshot of all known voxels taken under the lock."""
        with self._lock:
            snapshot = [item for bucket in self._buckets.values() for item in bucket.items()]
        yield from snapshot

    def keys(self, state: int | None = None) -> np.ndarray:
        rows = [key for key, s in self.items() if state is None or s == state]
        if not rows:
            return np.zeros((0, 3), dtype=np.int64)
        return np.array(sorted(rows), dtype=np.int64)

    def count(self, state: int) -> int:
        return sum(1 for _, s in self.items() if s == state)

    def center(self, key: Key | np.ndarray) -> np.ndarray:
        return (np.asarray(key, dtype=float) + 0.5) * self.resolution

    def contains_point(self, point: np.ndarray) -> bool:
        if self.bounds is None:
            return True
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.bounds[0]) and np.all(p <= self.bounds[1]))

    def copy(self) -> VoxelGrid:
        other = VoxelGrid(self.resolution, self.bounds)
        with self._lock:
            other._buckets = {h: dict(b) for h, b in self._buckets.items()}
            other._size = self._size
        return other


def traverse_rays(origin: np.ndarray, targets: np.ndarray, resolution: float) -> tuple[np.ndarray, np.ndarray]:
    """Voxel DDA from ``origin`` to each target.

    Returns the keys of all voxels crossed strictly before each target's voxel
    (the origin voxel included) and the target keys.
    """
    o = np.asarray(origin, dtype=float).reshape(3)
    tg = _as_points(targets)
    end = voxel_keys(tg, resolution)
    if len(tg) == 0:
        return np.zeros((0, 3), dtype=np.int64), end
    start = voxel_keys(o.reshape(1, 3), resolution)[0]
    cur = np.repeat(start.reshape(1, 3), len(tg), axis=0)
    o_v = o / resolution
    d = tg / resolution - o_v
    step = np.sign(end - cur).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = np.where(step > 0, cur + 1, cur).astype(float)
        t_max = np.where(d != 0, (boundary - o_v) / d, np.inf)
        t_delta = np.where(d != 0, np.abs(1.0 / d), np.inf)
    remaining = np.abs(end - cur).sum(axis=1)
    visited: list[np.ndarray] = []
    active = np.nonzero(remaining > 0)[0]
    while active.size:
        visited.append(cur[active].copy())
        tm = np.where(cur[active] == end[active], np.inf, t_max[active])
        axis = np.argmin(tm, axis=1)
        cur[active, axis] += step[active, axis]
        t_max[active, axis] += t_delta[active, axis]
        remaining[active] -= 1
        active = active[remaining[active] > 0]
    if not visited:
        return np.zeros((0, 3), dtype=np.int64), end
    return np.concatenate(visited, axis=0), end


def raycast_update(grid: VoxelGrid, origin: np.ndarray, scan: PointCloud) -> VoxelGrid:
    """Carve free space along each ray, then mark every endpoint voxel as obstacle."""
    if len(scan) == 0:
        return grid
    origin = np.asarray(origin, dtype=float).reshape(3)
    if not grid.contains_point(origin):
        raise ValueError(f"ray origin {origin.tolist()} outside map bounds")
    crossed, ends = traverse_rays(origin, scan.points, grid.resolution)
    with grid.writing():
        freed = grid.assign(crossed, VoxelState.FREE, protect=(VoxelState.OBSTACLE,)) if len(crossed) else 0
        hits = grid.assign(ends, VoxelState.OBSTACLE)
    trace.debug(f"raycast rays {len(scan)} freed {freed} hits {hits}")
    return grid


def sphere_offsets(margin: float, resolution: float) -> np.ndarray:
    """All integer offsets whose centre distance is within ``margin`` (excluding zero)."""
    rad = int(np.floor(margin / resolution + 1e-9))
    rng = np.arange(-rad, rad + 1)
    off = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    dist = np.linalg.norm(off, axis=1) * resolution
    keep = (dist <= margin + 1e-9) & (dist > 0)
    return off[keep]


def inflate(grid: VoxelGrid, margin: float) -> VoxelGrid:
    """Mark free voxels whose centre lies within ``margin`` of an obstacle centre."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if margin == 0:
        return grid
    obstacles = grid.keys(VoxelState.OBSTACLE)
    free = grid.keys(VoxelState.FREE)
    if len(obstacles) == 0 or len(free) == 0:
        return grid
    rad = int(np.ceil(margin / grid.resolution)) + 1
    lo = obstacles.min(axis=0) - rad
    hi = obstacles.max(axis=0) + rad
    inside = np.all((free >= lo) & (free <= hi), axis=1)
    candidates = free[inside]
    if len(candidates) == 0:
        return grid
    clear = np.ones(tuple((hi - lo + 1).tolist()), dtype=bool)
    o = obstacles - lo
    clear[o[:, 0], o[:, 1], o[:, 2]] = False
    dist = distance_transform_edt(clear) * grid.resolution
    c = candidates - lo
    near = dist[c[:, 0], c[:, 1], c[:, 2]] <= margin + 1e-9
    with grid.writing():
        grid.assign(candidates[near], VoxelState.INFLATED)
    trace.debug(f"inflate margin {margin:g} inflated {int(near.sum())}")
    return grid


__all__ = [
    "N_X",
    "N_Y",
    "UNKNOWN",
    "DegenerateGeometryError",
    "PointCloud",
    "Pose",
    "VoxelGrid",
    "VoxelState",
    "hash_key",
    "hash_keys",
    "inflate",
    "raycast_update",
    "right_jacobian",
    "so3_exp",
    "so3_log",
    "skew",
    "sphere_offsets",
    "traverse_rays",
    "voxel_index",
    "voxel_keys",
]
