"""Error-state Kalman filter localisation with voxel GICP measurements and prior-map relocalisation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import trace
from .geometry import PointCloud, Pose, right_jacobian, skew, so3_exp, so3_log, voxel_keys
from .lidar import LidarConfig, SimLidar, SimWorld
from .trajectory import GRAVITY, MavSimState

GRAVITY_VECTOR = np.array([0.0, 0.0, -GRAVITY])
STATE_DIM = 18
NOISE_DIM = 15

# Error-state blocks: rotation, position, velocity, gyro bias, accel bias, gravity bias.
THETA, POS, VEL, BG, BA, BGRAV = (slice(3 * i, 3 * i + 3) for i in range(6))


class RegistrationError(ValueError):
    """Registration inputs cannot be used at all (empty clouds, empty map)."""


class EskfNoise(BaseModel):
    gyro: float = Field(0.002, gt=0)
    accel: float = Field(0.02, gt=0)
    gyro_bias: float = Field(1e-4, gt=0)
    accel_bias: float = Field(1e-4, gt=0)
    gravity_bias: float = Field(1e-5, gt=0)
    position_measurement: float = Field(0.05, gt=0)
    rotation_measurement: float = Field(0.01, gt=0)
    initial_rotation: float = Field(0.01, gt=0)
    initial_position: float = Field(0.05, gt=0)
    initial_velocity: float = Field(0.05, gt=0)
    initial_bias: float = Field(0.01, gt=0)

    model_config = ConfigDict(extra="forbid")


class GicpConfig(BaseModel):
    voxel_size: float = Field(0.5, gt=0)
    weight: float = Field(1.0, gt=0)
    regularizer: float = Field(1e-3, gt=0)
    max_iterations: int = Field(30, ge=1)
    tolerance: float = Field(1e-6, gt=0)
    min_points: int = Field(6, ge=3)
    planarity: float = Field(0.1, gt=0, le=1)
    max_correspondence: float = Field(1.0, gt=0)
    min_correspondences: int = Field(10, ge=1)
    frobenius: bool = True

    model_config = ConfigDict(extra="forbid")


@dataclass(frozen=True)
class ImuSample:
    omega: np.ndarray
    accel: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.accel)) and math.isfinite(self.timestamp))


@dataclass(frozen=True)
class EskfState:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    covariance: np.ndarray = field(default_factory=lambda: np.eye(STATE_DIM) * 1e-4)

    def __post_init__(self) -> None:
        for name in ("position", "velocity", "bias_gyro", "bias_accel", "bias_gravity"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        cov = np.asarray(self.covariance, dtype=float).reshape(STATE_DIM, STATE_DIM)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @classmethod
    def initial(cls, pose: Pose, velocity: np.ndarray, noise: EskfNoise) -> EskfState:
        sigma = np.concatenate(
            [
                np.full(3, noise.initial_rotation),
                np.full(3, noise.initial_position),
                np.full(3, noise.initial_velocity),
                np.full(9, noise.initial_bias),
            ]
        )
        return cls(pose.rotation, pose.translation, velocity, covariance=np.diag(sigma**2))

    @property
    def pose(self) -> Pose:
        return Pose(self.rotation, self.position)

    def boxplus(self, dx: np.ndarray) -> EskfState:
        """Inject an error-state vector; rotation errors act on the right."""
        d = np.asarray(dx, dtype=float).reshape(STATE_DIM)
        return replace(
            self,
            rotation=_orthonormal(self.rotation @ so3_exp(d[THETA])),
            position=self.position + d[POS],
            velocity=self.velocity + d[VEL],
            bias_gyro=self.bias_gyro + d[BG],
            bias_accel=self.bias_accel + d[BA],
            bias_gravity=self.bias_gravity + d[BGRAV],
        )

    def boxminus(self, other: EskfState) -> np.ndarray:
        """Error vector ``d`` with ``other.boxplus(d) == self``."""
        return np.concatenate(
            [
                so3_log(other.rotation.T @ self.rotation),
                self.position - other.position,
                self.velocity - other.velocity,
                self.bias_gyro - other.bias_gyro,
                self.bias_accel - other.bias_accel,
                self.bias_gravity - other.bias_gravity,
            ]
        )


def _orthonormal(rotation: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1.0
        r = u @ vt
    return r


def process_noise(noise: EskfNoise, dt: float) -> np.ndarray:
    """Covariance of (gyro, accel, gyro walk, accel walk, gravity walk) for one IMU interval."""
    sigma2 = np.concatenate(
        [
            np.full(3, noise.gyro**2),
            np.full(3, noise.accel**2),
            np.full(3, noise.gyro_bias**2 * dt),
            np.full(3, noise.accel_bias**2 * dt),
            np.full(3, noise.gravity_bias**2 * dt),
        ]
    )
    return np.diag(sigma2)


def imu_kinematics(state: EskfState, omega: np.ndarray, accel: np.ndarray, dt: float, noise: np.ndarray | None = None) -> EskfState:
    """Discrete nominal-state step; ``noise`` is an optional 15-vector added to the inputs and bias walks."""
    n = np.zeros(NOISE_DIM) if noise is None else np.asarray(noise, dtype=float).reshape(NOISE_DIM)
    w = np.asarray(omega, dtype=float) - state.bias_gyro - n[0:3]
    a = np.asarray(accel, dtype=float) - state.bias_accel - n[3:6]
    acc_world = state.rotation @ a + GRAVITY_VECTOR + state.bias_gravity
    return replace(
        state,
        rotation=state.rotation @ so3_exp(w * dt),
        position=state.position + state.velocity * dt + 0.5 * acc_world * dt**2,
        velocity=state.velocity + acc_world * dt,
        bias_gyro=state.bias_gyro + n[6:9],
        bias_accel=state.bias_accel + n[9:12],
        bias_gravity=state.bias_gravity + n[12:15],
    )


def propagation_jacobians(state: EskfState, omega: np.ndarray, accel: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Error-state transition ``F_x`` (18x18) and noise input ``F_w`` (18x15) of :func:`imu_kinematics`."""
    w = np.asarray(omega, dtype=float) - state.bias_gyro
    a = np.asarray(accel, dtype=float) - state.bias_accel
    r = state.rotation
    jr = right_jacobian(w * dt)
    d_acc = -r @ skew(a)
    eye = np.eye(3)
    fx = np.eye(STATE_DIM)
    fx[THETA, THETA] = so3_exp(w * dt).T
    fx[THETA, BG] = -jr * dt
    fx[POS, THETA] = 0.5 * dt**2 * d_acc
    fx[POS, VEL] = eye * dt
    fx[POS, BA] = -0.5 * dt**2 * r
    fx[POS, BGRAV] = 0.5 * dt**2 * eye
    fx[VEL, THETA] = dt * d_acc
    fx[VEL, BA] = -dt * r
    fx[VEL, BGRAV] = dt * eye
    fw = np.zeros((STATE_DIM, NOISE_DIM))
    fw[THETA, 0:3] = -jr * dt
    fw[POS, 3:6] = -0.5 * dt**2 * r
    fw[VEL, 3:6] = -dt * r
    fw[BG, 6:9] = eye
    fw[BA, 9:12] = eye
    fw[BGRAV, 12:15] = eye
    return fx, fw


def eskf_propagate(state: EskfState, imu: ImuSample, dt: float, noise: EskfNoise | None = None) -> EskfState:
    """Advance the nominal state by one IMU sample and grow the error covariance."""
    if not 0 < dt <= 0.02:
        raise ValueError(f"IMU interval {dt:g} s outside (0, 0.02]")
    if not imu.finite:
        trace.warn(f"IMU sample at {imu.timestamp:g} s is not finite, skipped")
        return state
    noise = noise or EskfNoise()
    fx, fw = propagation_jacobians(state, imu.omega, imu.accel, dt)
    nominal = imu_kinematics(state, imu.omega, imu.accel, dt)
    cov = fx @ state.covariance @ fx.T + fw @ process_noise(noise, dt) @ fw.T
    return replace(nominal, covariance=0.5 * (cov + cov.T))


class UpdateOutcome(NamedTuple):
    state: EskfState
    applied: bool
    iterations: int
    step_norms: list[float]


_H = np.zeros((6, STATE_DIM))
_H[0:3, THETA] = np.eye(3)
_H[3:6, POS] = np.eye(3)


def _pose_residual(measurement: Pose, state: EskfState) -> np.ndarray:
    return np.concatenate([so3_log(state.rotation.T @ measurement.rotation), measurement.translation - state.position])


def eskf_update(
    state: EskfState,
    measurement: Pose,
    noise: EskfNoise | None = None,
    *,
    epsilon: float = 0.1,
    max_iterations: int = 10,
) -> UpdateOutcome:
    """Iterated update with a pose observation of rotation and position.

    Iterates until the correction step is shorter than ``epsilon``; a non-positive-definite
    innovation covariance skips the update with a warning.
    """
    noise = noise or EskfNoise()
    v = np.diag(np.concatenate([np.full(3, noise.rotation_measurement**2), np.full(3, noise.position_measurement**2)]))
    p = state.covariance
    s = _H @ p @ _H.T + v
    try:
        chol = cho_factor(s)
    except LinAlgError:
        trace.warn("innovation covariance is not positive definite, update skipped")
        return UpdateOutcome(state, False, 0, [])
    gain = cho_solve(chol, _H @ p).T
    error = np.zeros(STATE_DIM)
    current = state
    steps: list[float] = []
    for _ in range(max_iterations):
        new_error = gain @ (_pose_residual(measurement, current) + _H @ error)
        step = float(np.linalg.norm(new_error - error))
        steps.append(step)
        error = new_error
        current = state.boxplus(error)
        if step < epsilon:
            break
    ikh = np.eye(STATE_DIM) - gain @ _H
    cov = ikh @ p @ ikh.T + gain @ v @ gain.T
    trace.debug(f"eskf update iterations {len(steps)} correction {np.linalg.norm(error):.4f}")
    return UpdateOutcome(replace(current, covariance=0.5 * (cov + cov.T)), True, len(steps), steps)


@dataclass(frozen=True)
class GaussianMap:
    """Per-voxel means and registration weights of the planar voxels of a reference cloud."""

    voxel_size: float
    keys: np.ndarray
    means: np.ndarray
    weights: np.ndarray
    _tree: cKDTree | None = field(init=False, repr=False, default=None)
    _lookup: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = field(init=False, repr=False, default=None)

    def __post_init__(self) -> None:
        if not len(self.keys):
            return
        object.__setattr__(self, "_tree", cKDTree(self.means))
        lo = self.keys.min(axis=0) - 1
        dims = self.keys.max(axis=0) - lo + 2
        codes = self._encode(self.keys, lo, dims)
        order = np.argsort(codes)
        object.__setattr__(self, "_lookup", (lo, dims, codes[order], order))

    def __len__(self) -> int:
        return int(len(self.means))

    @staticmethod
    def _encode(keys: np.ndarray, lo: np.ndarray, dims: np.ndarray) -> np.ndarray:
        k = keys - lo
        return (k[:, 0] * dims[1] + k[:, 1]) * dims[2] + k[:, 2]

    def own_voxel(self, points: np.ndarray) -> np.ndarray:
        """Index of the map voxel containing each point, -1 where there is none."""
        out = np.full(len(points), -1, dtype=np.int64)
        if self._lookup is None:
            return out
        lo, dims, codes, order = self._lookup
        keys = voxel_keys(points, self.voxel_size)
        inside = np.all((keys >= lo) & (keys < lo + dims), axis=1)
        c = self._encode(keys[inside], lo, dims)
        pos = np.clip(np.searchsorted(codes, c), 0, len(codes) - 1)
        hit = codes[pos] == c
        idx = np.nonzero(inside)[0]
        out[idx[hit]] = order[pos[hit]]
        return out

    def nearest(self, points: np.ndarray, gate: float) -> np.ndarray:
        out = np.full(len(points), -1, dtype=np.int64)
        if self._tree is None:
            return out
        dist, idx = self._tree.query(points, distance_upper_bound=gate)
        ok = np.isfinite(dist)
        out[ok] = idx[ok]
        return out


def build_gaussian_map(points: np.ndarray | PointCloud, config: GicpConfig | None = None) -> GaussianMap:
    """Fit a Gaussian to every voxel with enough points and keep the planar ones."""
    config = config or GicpConfig()
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float).reshape(-1, 3)
    if not len(pts):
        raise RegistrationError("reference cloud is empty")
    keys = voxel_keys(pts, config.voxel_size)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, pts)
    means = sums / counts[:, None]
    centered = pts - means[inverse]
    cov = np.zeros((len(uniq), 3, 3))
    np.add.at(cov, inverse, centered[:, :, None] * centered[:, None, :])
    cov /= counts[:, None, None]
    eig = np.linalg.eigvalsh(cov)
    keep = (counts >= config.min_points) & (eig[:, 1] > 1e-12) & (eig[:, 0] <= config.planarity * eig[:, 1])
    reg = cov[keep] + config.regularizer * np.eye(3)
    inv = np.linalg.inv(reg)
    if config.frobenius:
        inv = inv / np.linalg.norm(inv, axis=(1, 2))[:, None, None]
    trace.debug(f"gaussian map voxels {len(uniq)} planar {int(keep.sum())}")
    return GaussianMap(config.voxel_size, uniq[keep], means[keep], config.weight * inv)


class GicpResult(NamedTuple):
    pose: Pose
    cost: float
    iterations: int
    correspondences: int
    converged: bool


def _batch_skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def _correspond(q: np.ndarray, gmap: GaussianMap, gate: float, own_only: bool) -> np.ndarray:
    idx = gmap.own_voxel(q)
    if not own_only:
        missing = idx < 0
        idx[missing] = gmap.nearest(q[missing], gate)
    return idx


def gicp_register(scan: PointCloud | np.ndarray, gmap: GaussianMap, initial: Pose | None = None, config: GicpConfig | None = None) -> GicpResult:
    """Gauss-Newton pose aligning ``scan`` to the voxel Gaussians of ``gmap``.

    Each point pairs with the voxel containing it, or with the nearest voxel mean inside the
    correspondence gate; a final pass keeps own-voxel pairs only.
    """
    config = config or GicpConfig()
    pts = scan.points if isinstance(scan, PointCloud) else np.asarray(scan, dtype=float).reshape(-1, 3)
    if not len(pts):
        raise RegistrationError("scan is empty")
    pose = initial or Pose.identity()
    rot, trans = pose.rotation.copy(), pose.translation.copy()
    iterations = 0
    converged = False
    count = 0
    for own_only in (False, True):
        converged = False
        for _ in range(config.max_iterations):
            q = pts @ rot.T + trans
            idx = _correspond(q, gmap, config.max_correspondence, own_only)
            ok = idx >= 0
            count = int(ok.sum())
            if count < config.min_correspondences:
                trace.debug(f"gicp has only {count} correspondences")
                return GicpResult(Pose(rot, trans), math.inf, iterations, count, False)
            qv = q[ok]
            err = gmap.means[idx[ok]] - qv
            w = gmap.weights[idx[ok]]
            jac = np.concatenate([_batch_skew(qv), np.broadcast_to(-np.eye(3), (count, 3, 3))], axis=2)
            wj = w @ jac
            hess = np.einsum("nki,nkj->ij", jac, wj)
            grad = np.einsum("nki,nk->i", wj, err)
            try:
                delta = -np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                trace.warn("gicp normal equations are singular")
                return GicpResult(Pose(rot, trans), math.inf, iterations, count, False)
            step = so3_exp(delta[:3])
            rot = _orthonormal(step @ rot)
            trans = step @ trans + delta[3:]
            iterations += 1
            if float(np.linalg.norm(delta)) < config.tolerance:
                converged = True
                break
    q = pts @ rot.T + trans
    idx = _correspond(q, gmap, config.max_correspondence, True)
    ok = idx >= 0
    err = gmap.means[idx[ok]] - q[ok]
    cost = float(np.einsum("ni,nij,nj->", err, gmap.weights[idx[ok]], err))
    return GicpResult(Pose(rot, trans), cost, iterations, int(ok.sum()), converged)


class RelocalizationResult(NamedTuple):
    pose: Pose
    ok: bool
    overlap: float


def _subsample(points: np.ndarray, limit: int) -> np.ndarray:
    if len(points) <= limit:
        return points
    return points[:: math.ceil(len(points) / limit)]


def _coarse(config: GicpConfig) -> GicpConfig:
    return config.model_copy(update={"voxel_size": 2.0 * config.voxel_size, "max_correspondence": 2.0 * config.max_correspondence})


def relocalization_maps(prior: PointCloud, config: GicpConfig | None = None) -> tuple[GaussianMap, GaussianMap]:
    config = config or GicpConfig()
    return build_gaussian_map(prior.points, _coarse(config)), build_gaussian_map(prior.points, config)


def global_relocalize(
    live: PointCloud,
    prior: PointCloud,
    config: GicpConfig | None = None,
    *,
    initial: Pose | None = None,
    min_overlap: float = 0.3,
    max_points: int = 20_000,
    maps: tuple[GaussianMap, GaussianMap] | None = None,
) -> RelocalizationResult:
    """Pose ``T_ex`` with ``live ~ T_ex * prior``, from a coarse then a fine registration.

    Without ``initial`` the clouds are first aligned by their centroids. On failure the
    initial pose (or identity) is returned with ``ok`` false. ``maps`` are the coarse and fine
    Gaussian maps of ``prior`` from :func:`relocalization_maps`.
    """
    config = config or GicpConfig()
    if not len(live) or not len(prior):
        raise RegistrationError("relocalisation needs two non-empty clouds")
    fallback = initial or Pose.identity()
    src = _subsample(live.points, max_points)
    if initial is None:
        guess = Pose(np.eye(3), prior.points.mean(axis=0) - live.points.mean(axis=0))
    else:
        guess = initial.inverse()
    coarse_cfg = _coarse(config)
    coarse_map, fine_map = maps or relocalization_maps(prior, config)
    coarse = gicp_register(src, coarse_map, guess, coarse_cfg)
    if coarse.correspondences < config.min_correspondences:
        trace.warn("relocalisation failed: clouds do not overlap")
        return RelocalizationResult(fallback, False, 0.0)
    fine = gicp_register(src, fine_map, coarse.pose, config)
    t_ex = fine.pose.inverse()
    dist, _ = cKDTree(t_ex.apply(_subsample(prior.points, max_points))).query(src, distance_upper_bound=2.0 * config.voxel_size)
    overlap = float(np.mean(np.isfinite(dist)))
    if fine.correspondences < config.min_correspondences or overlap < min_overlap:
        trace.warn(f"relocalisation failed: overlap {overlap:.2f}")
        return RelocalizationResult(fallback, False, overlap)
    return RelocalizationResult(t_ex, True, overlap)


def reanchor(state: EskfState, t_ex: Pose) -> EskfState:
    """Carry ``state`` from the odometry frame into the prior-map frame, where ``odometry ~ t_ex * prior``.

    Rotation errors live in the body frame and keep their covariance; the world-frame blocks turn
    with the frame.
    """
    back = t_ex.inverse()
    rot = back.rotation
    turn = np.eye(STATE_DIM)
    for block in (POS, VEL, BGRAV):
        turn[block, block] = rot
    return replace(
        state,
        rotation=_orthonormal(rot @ state.rotation),
        position=back.apply(state.position),
        velocity=rot @ state.velocity,
        bias_gravity=rot @ state.bias_gravity,
        covariance=turn @ state.covariance @ turn.T,
    )


class Relocalizer:
    """Refreshes ``T_ex`` on a fixed simulated-time cadence and re-anchors the filter when it drifts.

    The live map is the list of recent scans placed with the propagated pose, so it lives in the
    odometry frame; after a re-anchor it is moved into the prior frame with the state.
    """

    def __init__(
        self,
        prior: PointCloud,
        config: GicpConfig | None = None,
        period: float = 5.0,
        *,
        distance: float = 0.05,
        angle: float = 0.01,
        window: int = 50,
    ) -> None:
        if period <= 0:
            raise ValueError("relocalisation period must be positive")
        self.prior = prior
        self.config = config or GicpConfig()
        self.period = period
        self.distance = distance
        self.angle = angle
        self.window = window
        self.pose = Pose.identity()
        self.last_time: float | None = None
        self.live: list[np.ndarray] = []
        self.history: list[tuple[float, bool, float]] = []
        self.reanchors = 0
        self._maps: tuple[GaussianMap, GaussianMap] | None = None

    def due(self, t: float) -> bool:
        return self.last_time is None or t - self.last_time >= self.period - 1e-9

    def add_scan(self, points: np.ndarray) -> None:
        self.live.append(np.asarray(points, dtype=float).reshape(-1, 3))
        del self.live[: -self.window]

    def update(self, t: float, live: PointCloud) -> RelocalizationResult | None:
        if not self.due(t) or not len(live):
            return None
        self.last_time = t
        if self._maps is None:
            self._maps = relocalization_maps(self.prior, self.config)
        result = global_relocalize(live, self.prior, self.config, initial=self.pose, maps=self._maps)
        if result.ok:
            self.pose = result.pose
        self.history.append((t, result.ok, float(np.linalg.norm(self.pose.translation))))
        return result

    def correct(self, t: float, state: EskfState) -> EskfState:
        """Relocalise the buffered live map when due and re-anchor ``state`` if ``T_ex`` is not negligible."""
        if not self.live or not self.due(t):
            return state
        result = self.update(t, PointCloud(np.concatenate(self.live)))
        if result is None or not result.ok:
            return state
        t_ex = result.pose
        if np.linalg.norm(t_ex.translation) <= self.distance and t_ex.rotation_angle() <= self.angle:
            return state
        back = t_ex.inverse()
        self.live = [back.apply(points) for points in self.live]
        self.pose = Pose.identity()
        self.reanchors += 1
        trace.debug(f"re-anchored at {t:g} s by {np.linalg.norm(t_ex.translation):.3f} m")
        return reanchor(state, t_ex)


class TruthOdometry:
    """Feeds the simulator state back unchanged."""

    def reset(self, sim: MavSimState) -> None:
        pass

    def step(self, sim: MavSimState, accel: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
        return sim.position.copy(), sim.velocity.copy()


def _yaw_matrix(psi: float) -> np.ndarray:
    return Rotation.from_euler("z", psi).as_matrix()


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


class EstimationConfig(BaseModel):
    noise: EskfNoise = Field(default_factory=EskfNoise)
    gicp: GicpConfig = Field(default_factory=GicpConfig)
    lidar: LidarConfig = Field(default_factory=lambda: LidarConfig(range_noise=0.01))
    simulate_imu_noise: bool = True
    scan_rate_hz: float = Field(10.0, gt=0)
    relocalize_period: float = Field(5.0, gt=0)
    imu_dt: float = Field(0.005, gt=0, le=0.02)
    duration: float = Field(20.0, gt=0)
    amplitude: float = Field(3.0, gt=0)
    frequency: float = Field(0.3, gt=0)
    yaw_rate: float = 0.1
    initial_offset: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3)
    update_gate: float = Field(0.5, gt=0)
    reanchor_distance: float = Field(0.05, ge=0)
    reanchor_angle: float = Field(0.01, ge=0)
    live_window: int = Field(50, ge=1)

    model_config = ConfigDict(extra="forbid")

    def relocalizer(self, prior: PointCloud) -> Relocalizer:
        return Relocalizer(
            prior,
            self.gicp,
            self.relocalize_period,
            distance=self.reanchor_distance,
            angle=self.reanchor_angle,
            window=self.live_window,
        )


def scan_update(state: EskfState, body: np.ndarray, gmap: GaussianMap, config: EstimationConfig) -> tuple[EskfState, bool]:
    """Register a body-frame scan from the predicted pose and fold it in when it passes the gate."""
    result = gicp_register(body, gmap, state.pose, config.gicp)
    if result.correspondences < config.gicp.min_correspondences:
        return state, False
    jump = float(np.linalg.norm(result.pose.translation - state.position))
    if jump > config.update_gate:
        trace.debug(f"scan update rejected, {jump:.3f} m from the prediction")
        return state, False
    outcome = eskf_update(state, result.pose, config.noise)
    return outcome.state, outcome.applied


class EskfOdometry:
    """Odometry source running the filter on synthesised IMU samples and scanner frames.

    With a prior cloud the filter is also re-anchored by periodic global relocalisation.
    """

    def __init__(
        self,
        world: SimWorld,
        gmap: GaussianMap,
        config: EstimationConfig | None = None,
        seed: int = 0,
        prior: PointCloud | None = None,
    ) -> None:
        self.config = config or EstimationConfig()
        self.gmap = gmap
        self.prior = prior
        self.lidar = SimLidar(world, self.config.lidar, seed=seed)
        self.rng = np.random.default_rng(seed + 1)
        self.state = EskfState()
        self.relocalizer = self.config.relocalizer(prior) if prior is not None else None
        self.t = 0.0
        self.next_scan = 0.0
        self.psi = 0.0
        self.updates = 0
        self.rejected = 0

    def reset(self, sim: MavSimState) -> None:
        self.state = EskfState.initial(Pose(_yaw_matrix(sim.psi), sim.position), sim.velocity, self.config.noise)
        self.relocalizer = self.config.relocalizer(self.prior) if self.prior is not None else None
        self.t = 0.0
        self.next_scan = 1.0 / self.config.scan_rate_hz
        self.psi = sim.psi

    def _imu(self, sim: MavSimState, accel: np.ndarray, dt: float) -> ImuSample:
        rot = _yaw_matrix(sim.psi)
        omega = np.array([0.0, 0.0, _wrap(sim.psi - self.psi) / dt])
        specific = rot.T @ (np.asarray(accel, dtype=float) - GRAVITY_VECTOR)
        if self.config.simulate_imu_noise:
            omega = omega + self.rng.normal(0.0, self.config.noise.gyro, 3)
            specific = specific + self.rng.normal(0.0, self.config.noise.accel, 3)
        self.psi = sim.psi
        return ImuSample(omega, specific, self.t)

    def step(self, sim: MavSimState, accel: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
        self.t += dt
        self.state = eskf_propagate(self.state, self._imu(sim, accel, dt), dt, self.config.noise)
        if self.t + 1e-9 >= self.next_scan:
            self.next_scan += 1.0 / self.config.scan_rate_hz
            self._correct(sim.position, _yaw_matrix(sim.psi))
        return self.state.position.copy(), self.state.velocity.copy()

    def _correct(self, position: np.ndarray, rotation: np.ndarray) -> None:
        frame = self.lidar.scan(position)
        if not len(frame):
            return
        body = (frame.points - position) @ rotation
        if self.relocalizer is not None:
            self.relocalizer.add_scan(self.state.pose.apply(body))
        self.state, applied = scan_update(self.state, body, self.gmap, self.config)
        self.updates += int(applied)
        self.rejected += int(not applied)
        if self.relocalizer is not None:
            self.state = self.relocalizer.correct(self.t, self.state)


def figure_eight(t: np.ndarray, center: np.ndarray, amplitude: float, frequency: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lemniscate positions, velocities and accelerations at a fixed height; all vanish in acceleration at t = 0."""
    tt = np.asarray(t, dtype=float).reshape(-1)
    w = frequency
    a, b = amplitude, 0.5 * amplitude
    zeros = np.zeros_like(tt)
    pos = np.column_stack([a * np.sin(w * tt), b * np.sin(2 * w * tt), zeros]) + np.asarray(center, dtype=float)
    vel = np.column_stack([a * w * np.cos(w * tt), 2 * b * w * np.cos(2 * w * tt), zeros])
    acc = np.column_stack([-a * w**2 * np.sin(w * tt), -4 * b * w**2 * np.sin(2 * w * tt), zeros])
    return pos, vel, acc


@dataclass
class EstimationLog:
    times: np.ndarray
    truth: np.ndarray
    estimates: np.ndarray
    quaternions: np.ndarray
    updates: int = 0
    rejected: int = 0
    relocalizations: list[tuple[float, bool, float]] = field(default_factory=list)
    reanchors: int = 0

    def position_rmse(self) -> float:
        err = np.linalg.norm(self.estimates - self.truth, axis=1)
        return float(np.sqrt(np.mean(err**2))) if err.size else 0.0

    def final_error(self) -> float:
        return float(np.linalg.norm(self.estimates[-1] - self.truth[-1]))

    def pose_rows(self) -> list[tuple[float, ...]]:
        """Rows ``t,x,y,z,qw,qx,qy,qz``."""
        return [(float(t), *map(float, p), *map(float, q)) for t, p, q in zip(self.times, self.estimates, self.quaternions, strict=True)]


def _quat_wxyz(rotation: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(rotation).as_quat()
    return np.array([w, x, y, z])


def run_estimation(
    config: EstimationConfig,
    *,
    center: np.ndarray,
    world: SimWorld | None = None,
    prior: PointCloud | None = None,
    seed: int = 0,
) -> EstimationLog:
    """Fly a figure-eight with exact motion and estimate it from IMU plus scanner updates.

    The filter starts ``config.initial_offset`` away from the true start. Without a world only
    the IMU is integrated; with a prior cloud the filter is re-anchored by global relocalisation.
    """
    dt = config.imu_dt
    steps = max(1, math.ceil(config.duration / dt - 1e-9))
    times = dt * np.arange(steps + 1)
    pos, vel, acc = figure_eight(times, center, config.amplitude, config.frequency)
    yaws = config.yaw_rate * times
    rng = np.random.default_rng(seed)
    start = Pose(_yaw_matrix(yaws[0]), pos[0] + np.asarray(config.initial_offset, dtype=float))
    state = EskfState.initial(start, vel[0], config.noise)
    gmap = build_gaussian_map(prior.points, config.gicp) if world is not None and prior is not None else None
    lidar = SimLidar(world, config.lidar, seed=seed) if world is not None else None
    relocalizer = config.relocalizer(prior) if prior is not None and gmap is not None else None
    estimates = np.zeros_like(pos)
    quats = np.zeros((len(times), 4))
    estimates[0], quats[0] = state.position, _quat_wxyz(state.rotation)
    updates = rejected = 0
    scan_period = 1.0 / config.scan_rate_hz
    next_scan = scan_period
    for k in range(steps):
        rot = _yaw_matrix(yaws[k])
        omega = np.array([0.0, 0.0, config.yaw_rate])
        specific = rot.T @ (acc[k] - GRAVITY_VECTOR)
        if config.simulate_imu_noise:
            omega = omega + rng.normal(0.0, config.noise.gyro, 3)
            specific = specific + rng.normal(0.0, config.noise.accel, 3)
        state = eskf_propagate(state, ImuSample(omega, specific, times[k]), dt, config.noise)
        t = times[k + 1]
        if lidar is not None and gmap is not None and t + 1e-9 >= next_scan:
            next_scan += scan_period
            frame = lidar.scan(pos[k + 1])
            if len(frame):
                body = (frame.points - pos[k + 1]) @ _yaw_matrix(yaws[k + 1])
                if relocalizer is not None:
                    relocalizer.add_scan(state.pose.apply(body))
                state, applied = scan_update(state, body, gmap, config)
                updates += int(applied)
                rejected += int(not applied)
            if relocalizer is not None:
                state = relocalizer.correct(t, state)
        estimates[k + 1], quats[k + 1] = state.position, _quat_wxyz(state.rotation)
    log = EstimationLog(
        times,
        pos,
        estimates,
        quats,
        updates,
        rejected,
        relocalizer.history if relocalizer else [],
        relocalizer.reanchors if relocalizer else 0,
    )
    trace.debug(f"estimation {config.duration:g} s updates {updates} rejected {rejected} rmse {log.position_rmse():.4f}")
    return log


__all__ = [
    "GRAVITY_VECTOR",
    "EskfNoise",
    "EskfOdometry",
    "EskfState",
    "EstimationConfig",
    "EstimationLog",
    "GaussianMap",
    "GicpConfig",
    "GicpResult",
    "ImuSample",
    "RegistrationError",
    "RelocalizationResult",
    "Relocalizer",
    "TruthOdometry",
    "UpdateOutcome",
    "build_gaussian_map",
    "eskf_propagate",
    "eskf_update",
    "figure_eight",
    "gicp_register",
    "global_relocalize",
    "imu_kinematics",
    "process_noise",
    "propagation_jacobians",
    "reanchor",
    "relocalization_maps",
    "run_estimation",
    "scan_update",
]
