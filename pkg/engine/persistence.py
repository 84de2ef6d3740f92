"""Run directory with a fixed layout for scene, instances, paths, grids, logs and the report."""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from .evaluation import EvalReport
from .geometry import PointCloud, VoxelGrid, VoxelState
from .io import read_pgm, read_ply, read_table, write_path_csv, write_pgm, write_ply, write_table, write_voxel_csv
from .perception import ColumnAxis, Plane, StructureInstance, StructureKind
from .scan_planning import ScanPath

# Gray levels of the top view, darkest wins per column.
TOP_VIEW_LEVELS = {VoxelState.OBSTACLE: 0, VoxelState.INFLATED: 96, VoxelState.FREE: 255}
TOP_VIEW_UNKNOWN = 176


def instance_to_dict(inst: StructureInstance) -> dict[str, Any]:
    data = inst.summary()
    data["indices"] = inst.indices.tolist()
    return data


def instance_from_dict(data: dict[str, Any]) -> StructureInstance:
    kind = StructureKind(data["kind"])
    indices = np.asarray(data["indices"], dtype=np.int64)
    plane = None
    if "plane" in data:
        a, b, c, d = data["plane"]
        plane = Plane.from_normal(np.array([a, b, c]), d, indices)
    column = None
    if "center" in data:
        z_min, z_max = data["z_range"]
        column = ColumnAxis(np.asarray(data["center"], dtype=float), float(z_min), float(z_max), float(data["radius"]))
    return StructureInstance(kind, indices, plane=plane, column=column, instance_id=data.get("id", ""))


def read_image_dir(folder: Path) -> dict[str, np.ndarray]:
    """Every PGM in ``folder`` keyed by file name, in name order."""
    if not folder.is_dir():
        raise FileNotFoundError(f"image folder {folder} does not exist")
    return {p.name: read_pgm(p) for p in sorted(folder.glob("*.pgm"))}


def top_view(grid: VoxelGrid) -> np.ndarray:
    """Top view in [0, 1]; the first row is the largest y, columns run along +x."""
    r = grid.resolution
    if grid.bounds is not None:
        lo = np.floor(grid.bounds[0][:2] / r).astype(np.int64)
        hi = np.ceil(grid.bounds[1][:2] / r).astype(np.int64)
    else:
        keys = grid.keys()
        if not len(keys):
            return np.full((1, 1), TOP_VIEW_UNKNOWN / 255.0)
        lo, hi = keys[:, :2].min(axis=0), keys[:, :2].max(axis=0) + 1
    shape = (int(hi[1] - lo[1]), int(hi[0] - lo[0]))
    image = np.full(shape, TOP_VIEW_UNKNOWN, dtype=np.int64)
    for state in (VoxelState.FREE, VoxelState.INFLATED, VoxelState.OBSTACLE):
        keys = grid.keys(state)
        if not len(keys):
            continue
        cols = keys[:, 0] - lo[0]
        rows = keys[:, 1] - lo[1]
        ok = (rows >= 0) & (rows < shape[0]) & (cols >= 0) & (cols < shape[1])
        level = TOP_VIEW_LEVELS[state]
        current = image[rows[ok], cols[ok]]
        image[rows[ok], cols[ok]] = np.where(current == TOP_VIEW_UNKNOWN, level, np.minimum(current, level))
    return image[::-1] / 255.0


class RunStore:
    """Owns the files of one run directory; existing files are overwritten."""

    def __init__(self, root: Path):
        self.root = root
        self.scene_path = root / "scene.ply"
        self.instances_path = root / "instances.json"
        self.paths_dir = root / "paths"
        self.grids_dir = root / "grids"
        self.logs_dir = root / "logs"
        self.images_dir = root / "images"
        self.report_path = root / "report.json"

    def _dir(self, path: Path) -> Path:
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write_scene(self, cloud: PointCloud) -> None:
        self._dir(self.root)
        write_ply(self.scene_path, cloud)

    def read_scene(self) -> PointCloud:
        return read_ply(self.scene_path)

    def write_instances(self, instances: Sequence[StructureInstance]) -> None:
        self._dir(self.root)
        with open(self.instances_path, "w", encoding="utf-8") as fh:
            json.dump([instance_to_dict(i) for i in instances], fh, indent=1)
            fh.write("\n")

    def read_instances_document(self) -> Any:
        with open(self.instances_path, encoding="utf-8") as fh:
            return json.load(fh)

    def read_instances(self) -> list[StructureInstance]:
        return [instance_from_dict(entry) for entry in self.read_instances_document()]

    def write_path(self, path: ScanPath) -> Path:
        target = self._dir(self.paths_dir) / f"{path.instance_id}.csv"
        write_path_csv(target, path.positions, path.yaws)
        return target

    def read_paths(self, instances: Sequence[StructureInstance]) -> dict[str, ScanPath]:
        """Stored paths of the given instances; spirals regain their column centre."""
        out: dict[str, ScanPath] = {}
        for inst in instances:
            target = self.paths_dir / f"{inst.instance_id}.csv"
            if not target.exists():
                continue
            _, rows = read_table(target)
            rows = rows.reshape(-1, 4)
            if inst.kind is StructureKind.COLUMN and inst.column is not None:
                out[inst.instance_id] = ScanPath(rows[:, :3], rows[:, 3], inst.instance_id, "spiral", inst.column.center)
            else:
                out[inst.instance_id] = ScanPath(rows[:, :3], rows[:, 3], inst.instance_id, "coverage")
        return out

    def write_grid(self, name: str, grid: VoxelGrid) -> None:
        folder = self._dir(self.grids_dir)
        write_voxel_csv(folder / f"{name}.csv", grid)
        write_pgm(folder / f"{name}.pgm", top_view(grid))

    def write_log(self, name: str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
        target = self._dir(self.logs_dir) / f"{name}.csv"
        write_table(target, header, rows)
        return target

    def write_image(self, name: str, image: np.ndarray) -> Path:
        target = self._dir(self.images_dir) / f"{name}.pgm"
        write_pgm(target, image)
        return target

    def read_log(self, name: str) -> tuple[list[str], np.ndarray]:
        return read_table(self.logs_dir / f"{name}.csv")

    def read_report(self) -> EvalReport:
        if not self.report_path.exists():
            return EvalReport()
        return EvalReport.model_validate_json(self.report_path.read_text(encoding="utf-8"))

    def write_report(self, report: EvalReport) -> None:
        self._dir(self.root)
        self.report_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")


__all__ = ["RunStore", "instance_from_dict", "instance_to_dict", "read_image_dir", "top_view"]
