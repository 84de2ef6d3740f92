"""Ground-truth occupancy world and a simulated dome scanner casting into it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import trace
from .geometry import PointCloud, voxel_keys


@dataclass(frozen=True)
class SimWorld:
    """Dense boolean occupancy on a voxel lattice whose first cell has global key ``origin_key``."""

    occupancy: np.ndarray
    origin_key: np.ndarray
    resolution: float

    def __post_init__(self) -> None:
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.ndim != 3 or occ.size == 0:
            raise ValueError("occupancy must be a non-empty 3-D array")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "origin_key", np.asarray(self.origin_key, dtype=np.int64).reshape(3))

    @property
    def lower(self) -> np.ndarray:
        return self.origin_key * self.resolution

    @property
    def upper(self) -> np.ndarray:
        return (self.origin_key + np.asarray(self.occupancy.shape)) * self.resolution

    def _index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = voxel_keys(np.asarray(points, dtype=float).reshape(-1, 3), self.resolution) - self.origin_key
        inside = np.all((idx >= 0) & (idx < np.asarray(self.occupancy.shape)), axis=1)
        return idx, inside

    def occupied(self, points: np.ndarray) -> np.ndarray:
        """True for points inside an occupied voxel; points outside the lattice are free."""
        idx, inside = self._index(points)
        out = np.zeros(len(idx), dtype=bool)
        i = idx[inside]
        out[inside] = self.occupancy[i[:, 0], i[:, 1], i[:, 2]]
        return out

    def obstacle_keys(self) -> np.ndarray:
        return np.argwhere(self.occupancy).astype(np.int64) + self.origin_key

    def cast(self, origin: np.ndarray, directions: np.ndarray, max_range: float, step: float | None = None) -> np.ndarray:
        """Distance to the first occupied voxel along each unit direction, ``inf`` when none is hit."""
        o = np.asarray(origin, dtype=float).reshape(3)
        dirs = np.asarray(directions, dtype=float).reshape(-1, 3)
        step = step or self.resolution / 3.0
        # Rays leaving the lattice cannot hit anything, so the march stops at the box diagonal.
        span = float(np.linalg.norm(self.upper - self.lower)) + float(np.linalg.norm(o - np.clip(o, self.lower, self.upper)))
        reach = min(max_range, span)
        ts = np.arange(step, reach + step, step)
        out = np.full(len(dirs), np.inf)
        chunk = max(1, 400_000 // max(1, len(ts)))
        for lo in range(0, len(dirs), chunk):
            d = dirs[lo : lo + chunk]
            pts = o + d[:, None, :] * ts[None, :, None]
            hit = self.occupied(pts.reshape(-1, 3)).reshape(len(d), len(ts))
            any_hit = hit.any(axis=1)
            first = np.argmax(hit, axis=1)
            out[lo : lo + chunk][any_hit] = ts[first[any_hit]]
        out[out > max_range] = np.inf
        return out


class LidarConfig(BaseModel):
    horizontal_step_deg: float = Field(4.0, gt=0, le=90)
    vertical_min_deg: float = -7.0
    vertical_max_deg: float = 52.0
    vertical_beams: int = Field(12, ge=1)
    max_range: float = Field(40.0, gt=0)
    range_noise: float = Field(0.0, ge=0)
    rate_hz: float = Field(10.0, gt=0)

    model_config = ConfigDict(extra="forbid")


def beam_directions(config: LidarConfig) -> np.ndarray:
    """Unit vectors of the full 360 degree fan, azimuth-major."""
    az = np.deg2rad(np.arange(0.0, 360.0, config.horizontal_step_deg))
    if config.vertical_beams == 1:
        el = np.deg2rad(np.array([config.vertical_min_deg]))
    else:
        el = np.deg2rad(np.linspace(config.vertical_min_deg, config.vertical_max_deg, config.vertical_beams))
    a, e = np.meshgrid(az, el, indexing="ij")
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


class SimLidar:
    """Scanner model with seeded range noise."""

    def __init__(self, world: SimWorld, config: LidarConfig | None = None, seed: int = 0) -> None:
        self.world = world
        self.config = config or LidarConfig()
        self.directions = beam_directions(self.config)
        self.rng = np.random.default_rng(seed)

    @property
    def period(self) -> float:
        return 1.0 / self.config.rate_hz

    def scan(self, origin: np.ndarray) -> PointCloud:
        """One frame of world-frame hit points seen from ``origin``."""
        o = np.asarray(origin, dtype=float).reshape(3)
        ranges = self.world.cast(o, self.directions, self.config.max_range)
        hit = np.isfinite(ranges)
        r = ranges[hit]
        if self.config.range_noise > 0 and r.size:
            r = r + self.rng.normal(0.0, self.config.range_noise, r.size)
        pts = o + self.directions[hit] * r[:, None]
        trace.debug(f"lidar frame {int(hit.sum())}/{len(hit)} returns")
        return PointCloud(pts)


__all__ = ["LidarConfig", "SimLidar", "SimWorld", "beam_directions"]
