import numpy as np
import pytest
from engine.exploration import (
    ExplorationConfig,
    ExplorationSession,
    check_and_replan,
    exploration_rate,
    gen_exploration_goals,
    goal_height,
    path_roi,
    repair_scan_path,
    scan_trajectory,
    trim_blocked_ends,
)
from engine.geometry import PointCloud, VoxelGrid, VoxelState, voxel_index
from engine.perception import ColumnAxis, Plane, StructureInstance, StructureKind
from engine.planner import PlannerConfig, UnreachableError
from engine.scan_planning import CameraModel, ScanPath

BAND = (0.8, 3.2)


def _column() -> StructureInstance:
    return StructureInstance(StructureKind.COLUMN, [0], column=ColumnAxis(np.array([0.0, 0.0]), 0.0, 4.0, 0.3), instance_id="column_00")


def _free_block() -> VoxelGrid:
    grid = VoxelGrid(1.0)
    axes = [np.arange(10), np.arange(5), np.arange(3)]
    grid.assign(np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3), VoxelState.FREE)
    return grid


def _corridor_path() -> ScanPath:
    x = np.arange(10) + 0.5
    pts = np.column_stack([x, np.full(10, 2.5), np.full(10, 1.5)])
    return ScanPath(pts, np.zeros(10), "wall_00")


def test_exploration_rate_counts_known_voxels():
    grid = VoxelGrid(0.2)
    roi = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    assert exploration_rate(grid, roi) == 0.0
    grid.set((0, 0, 0), VoxelState.FREE)
    grid.set((1, 0, 0), VoxelState.OBSTACLE)
    assert exploration_rate(grid, roi) == pytest.approx(0.5)
    grid.assign(roi, VoxelState.FREE, protect=(VoxelState.OBSTACLE,))
    assert exploration_rate(grid, roi) == 1.0


def test_empty_region_counts_as_explored():
    assert exploration_rate(VoxelGrid(0.2), np.zeros((0, 3), dtype=np.int64)) == 1.0


def test_session_tracks_progress():
    grid = VoxelGrid(0.2)
    roi = np.array([[0, 0, 0], [1, 0, 0]])
    session = ExplorationSession("column_00", grid, roi, 0.95)
    assert session.update() == 0.0
    assert not session.done
    grid.assign(roi, VoxelState.FREE)
    assert session.update() == 1.0
    assert session.done
    assert session.history == [0.0, 1.0]


def test_session_rejects_bad_threshold():
    with pytest.raises(ValueError):
        ExplorationSession("x", VoxelGrid(0.2), np.zeros((0, 3)), 0.0)


def test_path_roi_stays_within_radius():
    pts = np.array([[1.0, 1.0, 1.0]])
    roi = path_roi(pts, 0.1, 0.3)
    assert len(roi) > 0
    centers = (roi + 0.5) * 0.1
    assert np.all(np.linalg.norm(centers - pts, axis=1) <= 0.3 + 1e-9)
    assert path_roi(np.zeros((0, 3)), 0.1, 0.3).shape == (0, 3)


def test_goal_height_retry_order():
    heights = [goal_height(k, (1.0, 3.0), 0.5) for k in range(5)]
    assert heights == pytest.approx([2.0, 1.5, 1.0, 2.5, 2.5])
    assert goal_height(2, (1.0, 3.0), 2.0) == pytest.approx(1.0)


def test_column_goals_form_a_ring():
    config = ExplorationConfig(goals_per_lap=4)
    goals = gen_exploration_goals(_column(), 0, CameraModel(), BAND, config)
    assert goals.shape == (4, 3)
    assert np.allclose(np.linalg.norm(goals[:, :2], axis=1), 0.3 + 1.5 + 1.0)
    assert np.allclose(goals[:, 2], 2.0)
    angles = np.degrees(np.arctan2(goals[:, 1], goals[:, 0]))
    assert np.allclose(np.diff(np.unwrap(np.radians(angles))), np.pi / 2)


def test_column_goals_start_nearest_to_the_drone():
    config = ExplorationConfig(goals_per_lap=4)
    goals = gen_exploration_goals(_column(), 0, CameraModel(), BAND, config, start=np.array([0.0, -5.0, 2.0]))
    assert np.allclose(goals[0], [0.0, -2.8, 2.0])


def test_blocked_goal_is_pushed_outward():
    config = ExplorationConfig(goals_per_lap=4)
    grid = VoxelGrid(0.2)
    key, _ = voxel_index([2.8, 0.0, 2.0], 0.2)
    grid.set(key, VoxelState.OBSTACLE)
    goals = gen_exploration_goals(_column(), 0, CameraModel(), BAND, config, grid=grid)
    assert np.allclose(goals[0], [3.3, 0.0, 2.0])


def test_wall_goals_line_up_in_front_of_the_wall():
    gy, gz = np.meshgrid(np.linspace(0.0, 4.0, 41), np.linspace(0.0, 2.0, 21))
    pts = np.column_stack([np.zeros(gy.size), gy.ravel(), gz.ravel()])
    idx = np.arange(len(pts))
    cloud = PointCloud(pts, np.tile([1.0, 0.0, 0.0], (len(pts), 1)))
    wall = StructureInstance(StructureKind.WALL, idx, plane=Plane.from_normal(np.array([1.0, 0.0, 0.0]), 0.0, idx), instance_id="wall_00")
    goals = gen_exploration_goals(wall, 0, CameraModel(), BAND, ExplorationConfig(), cloud=cloud, map_centroid=np.array([3.0, 2.0, 1.0]))
    assert goals.shape == (3, 3)
    assert np.allclose(goals[:, 0], 2.5)
    assert np.allclose(sorted(goals[:, 1]), [2.0 / 3.0, 2.0, 10.0 / 3.0])
    assert np.allclose(goals[:, 2], 2.0)


def test_wall_goals_need_the_cloud():
    idx = np.arange(3)
    wall = StructureInstance(StructureKind.WALL, idx, plane=Plane.from_normal(np.array([1.0, 0.0, 0.0]), 0.0, idx))
    with pytest.raises(ValueError):
        gen_exploration_goals(wall, 0, CameraModel(), BAND, ExplorationConfig())


def test_ground_has_no_goals():
    ground = StructureInstance(StructureKind.GROUND, [0, 1, 2])
    with pytest.raises(ValueError):
        gen_exploration_goals(ground, 0, CameraModel(), BAND, ExplorationConfig())


def test_free_path_is_returned_unchanged():
    path = _corridor_path()
    assert check_and_replan(_free_block(), path) is path


def test_pillar_is_detoured():
    grid = _free_block()
    for z in range(3):
        grid.set((5, 2, z), VoxelState.OBSTACLE)
    path = _corridor_path()
    fixed = check_and_replan(grid, path)
    keys = np.floor(fixed.positions).astype(np.int64)
    assert not np.any(grid.states(keys) == VoxelState.OBSTACLE)
    assert np.allclose(fixed.positions[0], path.positions[0])
    assert np.allclose(fixed.positions[-1], path.positions[-1])
    assert len(fixed) >= len(path)


def test_blocked_endpoint_cannot_be_repaired():
    grid = _free_block()
    grid.set((9, 2, 1), VoxelState.INFLATED)
    with pytest.raises(UnreachableError):
        check_and_replan(grid, _corridor_path())


def test_trim_blocked_ends():
    grid = _free_block()
    grid.set((0, 2, 1), VoxelState.OBSTACLE)
    grid.set((9, 2, 1), VoxelState.INFLATED)
    trimmed = trim_blocked_ends(grid, _corridor_path())
    assert len(trimmed) == 8
    assert np.allclose(trimmed.positions[0], [1.5, 2.5, 1.5])
    assert np.allclose(trimmed.positions[-1], [8.5, 2.5, 1.5])


def test_trim_leaving_one_waypoint_is_unreachable():
    grid = _free_block()
    grid.assign(np.array([[x, 2, 1] for x in range(1, 10)]), VoxelState.INFLATED)
    with pytest.raises(UnreachableError, match="single waypoint"):
        trim_blocked_ends(grid, _corridor_path())


def test_trim_everything_blocked():
    grid = VoxelGrid(1.0)
    grid.assign(np.floor(_corridor_path().positions).astype(np.int64), VoxelState.OBSTACLE)
    with pytest.raises(UnreachableError):
        trim_blocked_ends(grid, _corridor_path())


def test_repair_reports_dropped_end_waypoints():
    grid = _free_block()
    grid.set((9, 2, 1), VoxelState.INFLATED)
    path, dropped = repair_scan_path(grid, _corridor_path())
    assert dropped == 1
    assert len(path) == 9
    assert np.allclose(path.positions[-1], [8.5, 2.5, 1.5])


def test_repair_without_trimming_rejects_a_blocked_goal():
    grid = _free_block()
    grid.set((9, 2, 1), VoxelState.INFLATED)
    with pytest.raises(UnreachableError):
        repair_scan_path(grid, _corridor_path(), trim_ends=False)


def test_repair_of_a_clear_path_drops_nothing():
    path, dropped = repair_scan_path(_free_block(), _corridor_path(), trim_ends=False)
    assert dropped == 0
    assert len(path) == 10


def test_scan_trajectory_without_obstacles_keeps_the_path():
    path = ScanPath(np.array([[0.5, 2.5, 1.5], [2.5, 2.5, 1.5], [4.5, 2.5, 1.5]]), np.zeros(3))
    result = scan_trajectory(path, _free_block(), PlannerConfig(), 0.5)
    traj = result.trajectory
    assert result.iterations == 0
    assert np.allclose(traj.evaluate(traj.t_start), path.positions[0])
    assert np.allclose(traj.evaluate(traj.t_end), path.positions[-1])
    speed = np.linalg.norm(traj.evaluate(np.linspace(traj.t_start, traj.t_end, 50), 1), axis=1)
    assert speed.max() <= 0.5 + 1e-6
