"""Stage orchestrator: scene generation, segmentation, planning, inspection, estimation and metrics."""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import yaml
from scipy.ndimage import gaussian_filter1d

from . import integrity, trace
from .config import ConfigError, PipelineConfig, load_config
from .estimation import EskfOdometry, GaussianMap, build_gaussian_map, run_estimation
from .evaluation import EvalReport, PlannerRow, QualityRow, TrackingRow, eval_f1, eval_tracking, eval_wall_fraction
from .exploration import InspectionContext, InspectionRecord, run_inspection
from .facility import Facility, gen_facility, voxelize
from .geometry import VoxelGrid, VoxelState, voxel_keys
from .interfaces import IOBackend, OdometrySource
from .io import ConsoleIO
from .perception import StructureInstance, StructureKind, segment_structures
from .persistence import RunStore, read_image_dir
from .planner import BENCHMARK_HEADER, initial_path, run_benchmark
from .quality import default_model, filter_dataset, psnr, render_surface
from .scan_planning import ScanPath, flight_band, plan_scan_paths
from .trajectory import FlightLog, MavSimState, simulate_flight

STAGES = ("gen", "segment", "plan", "explore", "estimate", "fly", "metrics")

# A stage is skipped when one of these failed or was skipped earlier in the same run.
REQUIRES: dict[str, tuple[str, ...]] = {
    "segment": ("gen",),
    "plan": ("segment",),
    "explore": ("plan",),
    "estimate": ("gen",),
}

FLIGHT_HEADER = ("t", "x", "y", "z", "ref_x", "ref_y", "ref_z", "est_x", "est_y", "est_z", "yaw")
TRACKING_HEADER = ("path", "speed", "ape_max", "ape_rmse", "rpe_max", "rpe_rmse")
QUALITY_HEADER = ("file", "niqe", "niqe_norm", "kept")
POSE_HEADER = ("t", "x", "y", "z", "qw", "qx", "qy", "qz")


def curve_waypoints(center: np.ndarray, radius: float, straight: float = 4.0, step: float = 0.1) -> np.ndarray:
    """Straight leg, half circle around ``center``, straight leg back."""
    cx, cy, cz = (float(v) for v in center)
    n_line = max(2, math.ceil(straight / step) + 1)
    leg = np.linspace(cx - straight, cx, n_line)
    out_leg = np.column_stack([leg, np.full(n_line, cy - radius), np.full(n_line, cz)])
    n_arc = max(8, math.ceil(math.pi * radius / step))
    phi = np.linspace(0.0, math.pi, n_arc + 1)[1:]
    arc = np.column_stack([cx + radius * np.sin(phi), cy - radius * np.cos(phi), np.full(n_arc, cz)])
    back = np.column_stack([leg[::-1][1:], np.full(n_line - 1, cy + radius), np.full(n_line - 1, cz)])
    return np.vstack([out_leg, arc, back])


def helix_waypoints(center: np.ndarray, radius: float, rise: float, laps: float = 2.0, step: float = 0.1) -> np.ndarray:
    """Ascending helix starting at the lowest point, the profile a column scan flies."""
    count = max(16, math.ceil(2.0 * math.pi * radius * laps / step))
    phi = np.linspace(0.0, 2.0 * math.pi * laps, count + 1)
    c = np.asarray(center, dtype=float)
    return np.column_stack([c[0] + radius * np.cos(phi), c[1] + radius * np.sin(phi), c[2] + rise * phi / phi[-1]])


def motion_blur(image: np.ndarray, sigma_px: float) -> np.ndarray:
    """Horizontal Gaussian smear of ``sigma_px`` pixels."""
    if sigma_px <= 1e-6:
        return image.copy()
    return gaussian_filter1d(image, sigma_px, axis=1, mode="reflect")


def _flight_rows(log: FlightLog) -> list[tuple[float, ...]]:
    table = np.column_stack([log.times, log.positions, log.reference, log.estimates, log.yaws])
    return [tuple(float(v) for v in row) for row in table]


class Pipeline:
    """One run directory driven by one parsed configuration."""

    def __init__(
        self,
        data_dir: Path,
        run_dir: Path,
        profile: str = "desk",
        *,
        config_path: Path | None = None,
        seed: int | None = None,
        odometry: str | None = None,
        io_backend: IOBackend | None = None,
        model_path: Path | None = None,
        refit_model: bool = False,
        image_dir: Path | None = None,
        reference_dir: Path | None = None,
    ) -> None:
        self.io = io_backend or ConsoleIO()
        self.data_dir = data_dir
        try:
            self.config: PipelineConfig = load_config(data_dir, profile, config_path=config_path, seed=seed, odometry=odometry)
        except FileNotFoundError as exc:
            self.io.output(f"ERROR: Missing configuration file: {exc}")
            raise SystemExit from exc
        except yaml.YAMLError as exc:
            self.io.output(f"ERROR: Invalid configuration file: {exc}")
            raise SystemExit from exc
        except ConfigError as exc:
            for msg in exc.messages:
                self.io.output(f"ERROR: {msg}")
            raise SystemExit("Invalid configuration") from exc

        errors = integrity.validate_config(self.config)
        if errors:
            for msg in errors:
                self.io.output(f"ERROR: {msg}")
            raise SystemExit("Integrity check failed")

        self.store = RunStore(run_dir)
        self.model_path = model_path
        self.refit_model = refit_model
        self.image_dir = image_dir
        self.reference_dir = reference_dir
        self.report = EvalReport()
        self._facility: Facility | None = None
        self._instances: list[StructureInstance] | None = None
        self._paths: dict[str, ScanPath] | None = None
        self._gmap: GaussianMap | None = None
        trace.debug(f"pipeline profile {self.config.profile} seed {self.config.seed} odometry {self.config.odometry} run {run_dir}")

    # -- shared inputs ---------------------------------------------------------------------------

    def facility(self) -> Facility:
        """Generated scene; the stored cloud replaces the sampled one when the run already has it."""
        if self._facility is None:
            spec = self.config.scene()
            if self.store.scene_path.exists():
                self._facility = Facility(self.store.read_scene(), voxelize(spec), spec)
            else:
                self._facility = gen_facility(spec)
                self.store.write_scene(self._facility.cloud)
        return self._facility

    def instances(self) -> list[StructureInstance]:
        if self._instances is None:
            if not self.store.instances_path.exists():
                raise FileNotFoundError(f"{self.store.instances_path} not found, run 'segment' first")
            document = self.store.read_instances_document()
            errors = integrity.validate_instances(document, len(self.facility().cloud))
            if errors:
                for msg in errors:
                    self.io.output(f"ERROR: {msg}")
                raise SystemExit("Integrity check failed")
            self._instances = self.store.read_instances()
        return self._instances

    def scan_paths(self) -> dict[str, ScanPath]:
        if self._paths is None:
            if not self.store.paths_dir.is_dir():
                raise FileNotFoundError(f"{self.store.paths_dir} not found, run 'plan' first")
            self._paths = self.store.read_paths(self.instances())
        return self._paths

    def band(self) -> tuple[float, float]:
        """Flight band between the extracted floor and roof, or the facility slabs before segmentation."""
        cloud = self.facility().cloud
        floor_z, roof_z = 0.0, self.config.facility.height
        if self._instances is not None or self.store.instances_path.exists():
            for inst in self.instances():
                z = float(np.mean(cloud.points[inst.indices, 2]))
                if inst.kind is StructureKind.GROUND:
                    floor_z = z
                elif inst.kind is StructureKind.ROOF:
                    roof_z = z
        return flight_band(floor_z, roof_z, self.config.planning.clearance)

    def _center(self) -> np.ndarray:
        spec = self.config.facility
        lo, hi = self.band()
        return np.array([0.5 * spec.length, 0.5 * spec.width, 0.5 * (lo + hi)])

    def _start(self) -> np.ndarray:
        spec = self.config.facility
        lo, hi = self.band()
        return np.array([min(2.0, 0.1 * spec.length), 0.5 * spec.width, 0.5 * (lo + hi)])

    def odometry_factory(self) -> Callable[[], OdometrySource] | None:
        """Fresh ESKF odometry per flight when configured; ``None`` feeds back the true state."""
        if self.config.odometry != "eskf":
            return None
        facility = self.facility()
        if self._gmap is None:
            self._gmap = build_gaussian_map(facility.cloud.points, self.config.estimation.gicp)
        gmap = self._gmap
        counter = itertools.count()

        def make() -> OdometrySource:
            return EskfOdometry(
                facility.world, gmap, self.config.estimation, seed=self.config.seed + 104729 * next(counter), prior=facility.cloud
            )

        return make

    # -- stages ----------------------------------------------------------------------------------

    def stage_gen(self) -> None:
        spec = self.config.scene()
        self._facility = gen_facility(spec)
        self._instances = None
        self._paths = None
        self._gmap = None
        self.store.write_scene(self._facility.cloud)
        self.io.output(f"gen: {len(self._facility.cloud)} points, {spec.column_count} columns, {len(spec.wall_segments())} walls")

    def stage_segment(self) -> None:
        cloud = self.facility().cloud
        instances = segment_structures(cloud, self.config.perception, seed=self.config.seed)
        self.store.write_instances(instances)
        self._instances = instances
        self._paths = None
        errors = integrity.validate_instances(self.store.read_instances_document(), len(cloud))
        if errors:
            raise ValueError("; ".join(errors))
        self.report.instances = len(instances)
        if cloud.labels is None:
            trace.warn("scene has no labels, segmentation metrics skipped")
            self.io.output(f"segment: {len(instances)} instances")
            return
        counts = eval_f1(instances, cloud.points, cloud.labels, self.config.facility.column_spacing)
        walls = [inst for inst in instances if inst.kind is StructureKind.WALL]
        self.report.segmentation_f1 = counts.f1
        self.report.segmentation_precision = counts.precision
        self.report.segmentation_recall = counts.recall
        self.report.wall_fraction = eval_wall_fraction(walls, cloud.labels)
        columns = sum(1 for inst in instances if inst.kind is StructureKind.COLUMN)
        self.io.output(
            f"segment: {len(instances)} instances ({columns} columns, {len(walls)} walls), "
            f"F1 {counts.f1:.3f}, wall fraction {self.report.wall_fraction:.3f}"
        )

    def prior_grid(self) -> VoxelGrid:
        """Obstacle voxels of the prior scan at the task-map resolution."""
        facility = self.facility()
        r = self.config.exploration.map_resolution
        grid = VoxelGrid(r, (facility.world.lower, facility.world.upper))
        grid.assign(voxel_keys(facility.cloud.points, r), VoxelState.OBSTACLE)
        return grid

    def stage_plan(self) -> None:
        instances = self.instances()
        band = self.band()
        paths = plan_scan_paths(instances, self.facility().cloud, self.config.planning, band=band, grid=self.prior_grid())
        for path in paths.values():
            self.store.write_path(path)
        self._paths = paths
        total = sum(p.length() for p in paths.values())
        self.io.output(f"plan: {len(paths)} scan paths, {total:.1f} m, band {band[0]:.2f}..{band[1]:.2f} m")

    def _visit_order(self, start: np.ndarray) -> list[StructureInstance]:
        """Greedy nearest-start order over the instances that have a scan path."""
        paths = self.scan_paths()
        pending = [inst for inst in self.instances() if inst.instance_id in paths]
        order: list[StructureInstance] = []
        here = start
        while pending:
            dist = [float(np.linalg.norm(paths[i.instance_id].positions[0] - here)) for i in pending]
            nxt = pending.pop(int(np.argmin(dist)))
            order.append(nxt)
            here = paths[nxt.instance_id].positions[-1]
        return order

    def inspection_context(self) -> InspectionContext:
        facility = self.facility()
        cfg = self.config
        return InspectionContext(
            world=facility.world,
            cloud=facility.cloud,
            camera=cfg.planning.camera,
            band=self.band(),
            exploration=cfg.exploration,
            planner=cfg.planner,
            gains=cfg.tracking.gains,
            sim=cfg.tracking.sim,
            seed=cfg.seed,
            odometry=self.odometry_factory(),
        )

    def stage_explore(self) -> None:
        start = self._start()
        if bool(self.facility().world.occupied(start[None, :])[0]):
            raise ValueError(f"start position {start.round(2).tolist()} is inside an obstacle")
        records = run_inspection(self._visit_order(start), self.scan_paths(), self.inspection_context(), start)
        self._write_records(records)
        self.report.inspections = [r.outcome for r in records]
        done = sum(1 for r in records if r.outcome.success)
        self.io.output(f"explore: {done}/{len(records)} instances inspected, odometry {self.config.odometry}")
        for r in records:
            o = r.outcome
            state = "ok" if o.success else (o.message or "failed")
            self.io.output(f"  {o.instance}: alpha {o.alpha_final:.3f}, captures {o.captures}, {state}")

    def _write_records(self, records: Sequence[InspectionRecord]) -> None:
        for record in records:
            name = record.outcome.instance
            self.store.write_grid(name, record.task_map)
            if record.log is not None:
                self.store.write_log(f"flight_{name}", FLIGHT_HEADER, _flight_rows(record.log))

    def stage_estimate(self) -> None:
        facility = self.facility()
        log = run_estimation(self.config.estimation, center=self._center(), world=facility.world, prior=facility.cloud, seed=self.config.seed)
        self.store.write_log("estimate_pose", POSE_HEADER, log.pose_rows())
        truth = np.column_stack([log.times, log.truth])
        self.store.write_log("estimate_truth", ("t", "x", "y", "z"), truth.tolist())
        self.store.write_log("relocalization", ("t", "ok", "offset"), log.relocalizations)
        self.report.localization_rmse = log.position_rmse()
        self.io.output(
            f"estimate: RMSE {log.position_rmse():.4f} m, final error {log.final_error():.4f} m, "
            f"{log.updates} updates, {log.rejected} rejected, {log.reanchors} re-anchors"
        )

    def stage_fly(self) -> None:
        cfg = self.config
        bench = run_benchmark(cfg.planner)
        self.store.write_log("planner", BENCHMARK_HEADER, [row.as_row() for row in bench])
        self.report.planner = [
            PlannerRow(scenario=r.name, t_g=r.t_g, t_opt=r.t_opt, t_astar=r.t_astar, distance=r.distance, length=r.length, success=r.success)
            for r in bench
        ]
        for r in bench:
            self.io.output(f"fly: {r.name} D {r.distance:.3f} L {r.length:.3f} {'ok' if r.success else 'FAILED'}")

        center = self._center()
        rows: list[TrackingRow] = []
        curve = curve_waypoints(center, cfg.tracking.curve_radius)
        for speed in cfg.tracking.speeds:
            rows.append(self._track("curve", curve, speed))
        radius = cfg.planning.camera.distance + cfg.facility.column_radius
        lo, hi = self.band()
        helix = helix_waypoints(np.array([center[0], center[1], lo]), radius, min(1.0, hi - lo))
        rows.append(self._track("scan", helix, cfg.tracking.scan_speed))
        self.report.tracking = rows
        self.store.write_log("tracking", TRACKING_HEADER, [(r.path, r.speed, r.ape_max, r.ape_rmse, r.rpe_max, r.rpe_rmse) for r in rows])
        for r in rows:
            self.io.output(f"fly: {r.path} at {r.speed:g} m/s APE RMSE {r.ape_rmse:.4f} max {r.ape_max:.4f}")

    def _track(self, name: str, waypoints: np.ndarray, speed: float) -> TrackingRow:
        cfg = self.config
        traj = initial_path(waypoints, cfg.planner.model_copy(update={"cruise_speed": speed}))
        factory = self.odometry_factory()
        log = simulate_flight(
            traj,
            MavSimState(position=traj.evaluate(traj.t_start), mass=cfg.tracking.sim.mass),
            cfg.tracking.gains,
            cfg.tracking.sim.dt,
            settings=cfg.tracking.sim,
            odometry=factory() if factory is not None else None,
        )
        stats = eval_tracking(log.times, log.reference, log.positions, cfg.tracking.window)
        trace.debug(f"tracking {name} {speed:g} m/s samples {len(log)}")
        return TrackingRow(path=name, speed=speed, ape_max=stats.ape_max, ape_rmse=stats.ape_rmse, rpe_max=stats.rpe_max, rpe_rmse=stats.rpe_rmse)

    def capture_speeds(self) -> np.ndarray:
        """Speeds at evenly spread capture instants of the stored scan flights."""
        q = self.config.quality
        speeds: list[np.ndarray] = []
        for outcome in self.report.inspections:
            target = self.store.logs_dir / f"flight_{outcome.instance}.csv"
            if not target.exists():
                continue
            _, table = self.store.read_log(f"flight_{outcome.instance}")
            if len(table) < 2:
                continue
            vel = np.gradient(table[:, 1:4], table[:, 0], axis=0)
            speeds.append(np.linalg.norm(vel, axis=1))
        if not speeds:
            return np.full(q.max_images, self.config.tracking.scan_speed)
        flat = np.concatenate(speeds)
        idx = np.linspace(0, len(flat) - 1, min(q.max_images, len(flat))).round().astype(int)
        return flat[idx]

    def synthetic_captures(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        """Clean renders and their motion-blurred captures at the executed speeds."""
        q = self.config.quality
        cam = self.config.planning.camera
        rng = np.random.default_rng(self.config.seed + 31)
        clean: dict[str, np.ndarray] = {}
        blurred: dict[str, np.ndarray] = {}
        for k, speed in enumerate(self.capture_speeds()):
            name = f"capture_{k:03d}.pgm"
            image = render_surface(rng, q.image_size)
            sigma = float(speed) * q.exposure * cam.fx / cam.distance
            clean[name] = image
            blurred[name] = motion_blur(image, sigma)
            self.store.write_image(name.removesuffix(".pgm"), blurred[name])
        return blurred, clean

    def model_source(self) -> Path:
        """Explicit model file, else the run's own fitted model, else the one shipped under ``data``.

        Fitted models are only ever written into the run directory.
        """
        if self.model_path is not None:
            return self.model_path
        name = self.config.quality.model_file
        fitted = self.store.root / name
        return fitted if fitted.exists() else self.data_dir / name

    def stage_metrics(self) -> None:
        q = self.config.quality
        model = default_model(
            self.model_source(), store=self.store.root / q.model_file, refit=self.refit_model, seed=self.config.seed, patch_size=q.patch_size, c=q.mscn_c
        )
        if self.image_dir is not None:
            images = read_image_dir(self.image_dir)
            references = read_image_dir(self.reference_dir) if self.reference_dir is not None else {}
        else:
            images, references = self.synthetic_captures()
        scores = filter_dataset(images, model, q.s_dis)
        self.store.write_log("quality", QUALITY_HEADER, scores)
        self.report.quality = [QualityRow(file=s.name, niqe=s.niqe, niqe_norm=s.niqe_norm, kept=s.kept) for s in scores]
        values = [psnr(references[name], img) for name, img in images.items() if name in references]
        finite = [v for v in values if math.isfinite(v)]
        if values and not finite:
            trace.warn("every image equals its reference, PSNR is unbounded")
        self.report.psnr = float(np.mean(finite)) if finite else None
        kept = sum(1 for s in scores if s.kept)
        psnr_text = f", PSNR {self.report.psnr:.2f} dB" if self.report.psnr is not None else ""
        self.io.output(f"metrics: {kept}/{len(scores)} images kept at S_dis {q.s_dis:g}{psnr_text}")
        self._summary()

    def _summary(self) -> None:
        r = self.report
        if r.segmentation_f1 is not None:
            self.io.output(f"metrics: segmentation F1 {r.segmentation_f1:.3f}, wall fraction {r.wall_fraction or 0.0:.3f}")
        if r.inspections:
            self.io.output(f"metrics: inspection success {r.inspection_success:.0%} over {len(r.inspections)} instances")
        if r.localization_rmse is not None:
            self.io.output(f"metrics: localization RMSE {r.localization_rmse:.4f} m")

    # -- driver ----------------------------------------------------------------------------------

    def run(self, stages: Sequence[str]) -> EvalReport:
        """Run ``stages`` in order and write the report after each one.

        A failing stage is recorded in ``errors`` and the stages depending on it are skipped.
        Missing inputs stop the run with an ``ERROR:`` line.
        """
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stage '{unknown[0]}'")
        fresh = list(stages) == list(STAGES)
        self.report = EvalReport() if fresh else self.store.read_report()
        self.report = self.report.model_copy(update={"profile": self.config.profile, "seed": self.config.seed, "odometry": self.config.odometry, "errors": []})
        failed: set[str] = set()
        for stage in stages:
            blocked = [dep for dep in REQUIRES.get(stage, ()) if dep in failed]
            if blocked:
                failed.add(stage)
                self.report.errors.append(f"{stage}: skipped, '{blocked[0]}' failed")
                self.io.output(f"{stage}: skipped")
                continue
            handler: Callable[[], None] = getattr(self, f"stage_{stage}")
            try:
                handler()
            except FileNotFoundError as exc:
                self.io.output(f"ERROR: {exc}")
                self.store.write_report(self.report)
                raise SystemExit from exc
            except ValueError as exc:
                failed.add(stage)
                trace.warn(f"stage {stage} failed: {exc}")
                self.report.errors.append(f"{stage}: {exc}")
                self.io.output(f"{stage}: FAILED ({exc})")
            self.store.write_report(self.report)
        return self.report


def run(
    data_dir: Path,
    run_dir: Path,
    stages: Sequence[str],
    profile: str = "desk",
    *,
    config_path: Path | None = None,
    seed: int | None = None,
    odometry: str | None = None,
    io_backend: IOBackend | None = None,
) -> EvalReport:
    pipeline = Pipeline(data_dir, run_dir, profile, config_path=config_path, seed=seed, odometry=odometry, io_backend=io_backend)
    return pipeline.run(stages)


__all__ = [
    "FLIGHT_HEADER",
    "QUALITY_HEADER",
    "STAGES",
    "Pipeline",
    "curve_waypoints",
    "helix_waypoints",
    "motion_blur",
    "run",
]
