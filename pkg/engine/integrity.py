"""Cross-field checks on a parsed run configuration and on stored run artifacts."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

import numpy as np

if TYPE_CHECKING:  # pragma: no cover - used for type checking only
    from .config import PipelineConfig


def validate_config(config: PipelineConfig) -> list[str]:
    """Return every rule the configuration breaks; an empty list means it is usable."""

    errors: list[str] = []
    spec = config.facility
    centers = spec.column_centers()
    r = spec.column_radius
    if len(centers):
        if np.any(centers[:, 0] - r <= 0) or np.any(centers[:, 0] + r >= spec.length):
            errors.append(f"Columns of radius {r:g} do not fit along the facility length {spec.length:g}")
        if np.any(centers[:, 1] - r <= 0) or np.any(centers[:, 1] + r >= spec.width):
            errors.append(f"Columns of radius {r:g} do not fit across the facility width {spec.width:g}")
        if len(centers) > 1 and 2 * r >= spec.column_spacing:
            errors.append(f"Columns of radius {r:g} overlap at spacing {spec.column_spacing:g}")
    for seg in spec.walls:
        for x, y in (seg.start, seg.end):
            if not (0 <= x <= spec.length and 0 <= y <= spec.width):
                errors.append(f"Wall segment {seg.start} -> {seg.end} leaves the facility")
                break

    clearance = config.planning.clearance
    if spec.height - 2 * clearance <= 0:
        errors.append(f"Flight band is empty: height {spec.height:g} with clearance {clearance:g}")

    v_max = config.planner.weights.v_max
    for speed in config.tracking.speeds:
        if speed <= 0:
            errors.append(f"Tracking speed {speed:g} must be positive")
        elif speed > v_max:
            errors.append(f"Tracking speed {speed:g} exceeds v_max {v_max:g}")
    if config.tracking.scan_speed > v_max:
        errors.append(f"Scan speed {config.tracking.scan_speed:g} exceeds v_max {v_max:g}")
    if config.exploration.scan_speed > v_max:
        errors.append(f"Exploration scan speed {config.exploration.scan_speed:g} exceeds v_max {v_max:g}")
    if config.tracking.sim.dt > 0.01:
        errors.append(f"Simulator step {config.tracking.sim.dt:g} s exceeds 0.01 s")
    if not 0 < config.exploration.tau <= 1:
        errors.append(f"Exploration threshold {config.exploration.tau:g} outside (0, 1]")
    if not 0 < config.quality.s_dis <= 1:
        errors.append(f"Quality threshold {config.quality.s_dis:g} outside (0, 1]")
    if config.quality.image_size < config.quality.patch_size:
        errors.append(f"Image size {config.quality.image_size} is smaller than the patch size {config.quality.patch_size}")
    cam = config.planning.camera
    for name in ("fx", "fy", "cx", "cy", "distance"):
        if getattr(cam, name) <= 0:
            errors.append(f"Camera parameter '{name}' must be positive")
    return errors


def validate_instances(data: Any, point_count: int) -> list[str]:
    """Check a loaded ``instances.json`` document against the scene it belongs to."""

    errors: list[str] = []
    if not isinstance(data, list):
        return ["Instances document must be a list"]
    seen: set[str] = set()
    claimed: set[int] = set()
    for entry in data:
        if not isinstance(entry, dict):
            errors.append("Instance entry must be a mapping")
            continue
        inst_id = entry.get("id", "")
        if inst_id in seen:
            errors.append(f"Instance '{inst_id}' appears twice")
        seen.add(inst_id)
        kind = entry.get("kind")
        if kind not in ("ground", "roof", "wall", "column"):
            errors.append(f"Instance '{inst_id}' has invalid kind '{kind}'")
        if kind == "wall" and "plane" not in entry:
            errors.append(f"Wall '{inst_id}' has no plane")
        if kind == "column" and not {"center", "z_range", "radius"} <= entry.keys():
            errors.append(f"Column '{inst_id}' has no axis")
        indices = entry.get("indices", [])
        if not indices:
            errors.append(f"Instance '{inst_id}' has no points")
        bad = [i for i in indices if not 0 <= int(i) < point_count]
        if bad:
            errors.append(f"Instance '{inst_id}' references missing point {bad[0]}")
        overlap = claimed.intersection(int(i) for i in indices)
        if overlap:
            errors.append(f"Instance '{inst_id}' shares point {min(overlap)} with another instance")
        claimed.update(int(i) for i in indices)
    return errors


__all__ = ["validate_config", "validate_instances"]
