import math

import numpy as np
import pytest
from engine.facility import GROUND_LABEL, ROOF_LABEL
from engine.geometry import DegenerateGeometryError, PointCloud
from engine.perception import (
    PerceptionConfig,
    StructureKind,
    classify_columns,
    cluster_euclidean,
    extract_ground_csf,
    extract_roof,
    extract_wall_planes,
    fit_plane_ransac,
    segment_structures,
)
from tests.conftest import plane_points


def _grid_plane(z: float, size: float = 5.0, step: float = 0.1) -> np.ndarray:
    axis = np.arange(0.0, size + 1e-9, step)
    gx, gy = np.meshgrid(axis, axis)
    return np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)])


def _cube_surface(rng, corner, size: float = 1.0, density: float = 300.0) -> np.ndarray:
    ex, ey, ez = np.eye(3) * size
    c = np.asarray(corner, float)
    faces = [
        plane_points(rng, c, ex, ey, 1.0, 1.0, density),
        plane_points(rng, c + ez, ex, ey, 1.0, 1.0, density),
        plane_points(rng, c, ex, ez, 1.0, 1.0, density),
        plane_points(rng, c + ey, ex, ez, 1.0, 1.0, density),
        plane_points(rng, c, ey, ez, 1.0, 1.0, density),
        plane_points(rng, c + ex, ey, ez, 1.0, 1.0, density),
    ]
    return np.concatenate(faces)


def _cylinder(rng, center, radius: float, height: float, count: int = 3000) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * math.pi, count)
    z = rng.uniform(0.0, height, count)
    return np.column_stack([center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta), z])


def _vertical_wall(rng, start, end, height: float, normal, density: float = 200.0) -> PointCloud:
    start = np.array([*start, 0.0])
    direction = np.array([*end, 0.0]) - start
    length = float(np.linalg.norm(direction))
    pts = plane_points(rng, start, direction / length, [0.0, 0.0, 1.0], length, height, density)
    return PointCloud(pts, np.tile(normal, (len(pts), 1)))


def test_ransac_exact_plane():
    pts = _grid_plane(3.0)
    plane = fit_plane_ransac(pts, 0.01)
    assert np.allclose(plane.coefficients(), [0.0, 0.0, 1.0, -3.0], atol=1e-9)
    assert len(plane.inliers) == len(pts)


def test_ransac_three_points_give_their_plane():
    pts = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    plane = fit_plane_ransac(pts, 0.01)
    assert np.allclose(plane.coefficients(), [0.0, 0.0, 1.0, -1.0], atol=1e-9)


def test_ransac_with_outliers_recovers_normal():
    rng = np.random.default_rng(3)
    xy = rng.uniform(0.0, 5.0, (1000, 2))
    z = 0.1 * xy[:, 0] + 0.2 * xy[:, 1] + 1.0
    inliers = np.column_stack([xy, z])
    outliers = rng.uniform([0.0, 0.0, 0.0], [5.0, 5.0, 4.0], (200, 3))
    plane = fit_plane_ransac(np.vstack([inliers, outliers]), 0.05, seed=1)
    truth = np.array([-0.1, -0.2, 1.0]) / np.linalg.norm([-0.1, -0.2, 1.0])
    angle = math.degrees(math.acos(min(1.0, abs(float(plane.normal @ truth)))))
    assert angle < 1.0


def test_ransac_collinear_points_are_degenerate():
    pts = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegenerateGeometryError):
        fit_plane_ransac(pts, 0.01)


def test_csf_flat_plane_is_all_ground():
    cloud = PointCloud(_grid_plane(0.0))
    ground = extract_ground_csf(cloud)
    assert ground.kind is StructureKind.GROUND
    assert len(ground) == len(cloud)
    assert ground.plane.normal[2] > 0.99


def test_csf_excludes_the_top_of_a_cube():
    rng = np.random.default_rng(0)
    floor = _grid_plane(0.0, size=10.0)
    cube = _cube_surface(rng, (4.5, 4.5, 0.0))
    cloud = PointCloud(np.vstack([floor, cube]))
    ground = extract_ground_csf(cloud)
    z = cloud.points[ground.indices, 2]
    assert np.all(z < 0.2)
    assert np.count_nonzero(ground.indices < len(floor)) > 0.95 * len(floor)


def test_csf_rejects_tiny_clouds():
    with pytest.raises(DegenerateGeometryError):
        extract_ground_csf(PointCloud(_grid_plane(0.0, size=0.5)))


def test_roof_of_a_box_room_faces_down(room_cloud):
    roof = extract_roof(room_cloud, np.array([0.0, 0.0, 1.0]))
    assert roof.kind is StructureKind.ROOF
    assert roof.plane.normal[2] < -0.99
    assert np.allclose(room_cloud.points[roof.indices, 2], 3.0, atol=0.05)


def test_sloped_roof_within_tolerance():
    rng = np.random.default_rng(5)
    slope = math.radians(20.0)
    floor = plane_points(rng, (0, 0, 0), (1, 0, 0), (0, 1, 0), 4.0, 4.0, 300.0)
    run = 4.0 / math.cos(slope)
    ceiling = plane_points(rng, (0, 0, 3), (math.cos(slope), 0, math.sin(slope)), (0, 1, 0), run, 4.0, 300.0)
    cloud = PointCloud(np.vstack([floor, ceiling]))
    roof = extract_roof(cloud, np.array([0.0, 0.0, 1.0]), angle_tol_deg=25.0)
    assert roof.plane.normal[2] == pytest.approx(-math.cos(slope), abs=0.01)


def test_wall_only_cloud_has_no_roof():
    rng = np.random.default_rng(0)
    a = _vertical_wall(rng, (0, 0), (0, 4), 3.0, [1.0, 0.0, 0.0])
    b = _vertical_wall(rng, (0, 0), (4, 0), 3.0, [0.0, 1.0, 0.0])
    cloud = PointCloud(np.vstack([a.points, b.points]), np.vstack([a.normals, b.normals]))
    with pytest.raises(ValueError, match="no roof"):
        extract_roof(cloud, np.array([0.0, 0.0, 1.0]))


def test_two_cubes_make_two_clusters():
    rng = np.random.default_rng(0)
    pts = np.vstack([_cube_surface(rng, (0, 0, 0)), _cube_surface(rng, (6, 0, 0))])
    clusters = cluster_euclidean(pts, 0.5)
    assert len(clusters) == 2
    assert sum(len(c) for c in clusters) == len(pts)


def test_one_cube_is_one_cluster():
    rng = np.random.default_rng(0)
    assert len(cluster_euclidean(_cube_surface(rng, (0, 0, 0)), 0.5)) == 1


def _components(points: np.ndarray, d_thresh: float) -> list[set[int]]:
    adjacent = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2) <= d_thresh
    unseen = set(range(len(points)))
    parts = []
    while unseen:
        stack = [unseen.pop()]
        part = set(stack)
        while stack:
            for j in np.nonzero(adjacent[stack.pop()])[0].tolist():
                if j in unseen:
                    unseen.remove(j)
                    part.add(j)
                    stack.append(j)
        parts.append(part)
    return parts


@pytest.mark.parametrize("seed", range(10))
def test_clusters_match_brute_force_components(seed):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 10.0, (6, 3))
    clumps = [c + rng.normal(0.0, 0.2, (30, 3)) for c in centers]
    pts = np.vstack([*clumps, rng.uniform(0.0, 10.0, (40, 3))])
    clusters = cluster_euclidean(pts, 0.5)
    expected = _components(pts, 0.5)
    assert len(clusters) == len(expected)
    assert sorted(map(sorted, expected)) == sorted(sorted(c.tolist()) for c in clusters)


def test_empty_cloud_has_no_clusters():
    assert cluster_euclidean(np.zeros((0, 3)), 0.5) == []


def test_cylinder_is_a_column():
    rng = np.random.default_rng(0)
    cloud = PointCloud(_cylinder(rng, (2.0, 3.0), 0.3, 6.0))
    columns = classify_columns(cloud, [np.arange(len(cloud))])
    assert len(columns) == 1
    axis = columns[0].column
    assert axis.radius == pytest.approx(0.3, rel=0.05)
    assert np.allclose(axis.center, [2.0, 3.0], atol=0.03)
    assert columns[0].instance_id == "column_00"


def test_long_wall_fragment_is_not_a_column():
    rng = np.random.default_rng(0)
    ex, ey, ez = np.eye(3)
    faces = [
        plane_points(rng, (0, 0, 0), ex, ez, 8.0, 6.0, 50.0),
        plane_points(rng, (0, 0.2, 0), ex, ez, 8.0, 6.0, 50.0),
        plane_points(rng, (0, 0, 0), ey, ez, 0.2, 6.0, 200.0),
        plane_points(rng, (8, 0, 0), ey, ez, 0.2, 6.0, 200.0),
    ]
    cloud = PointCloud(np.vstack(faces))
    assert classify_columns(cloud, [np.arange(len(cloud))]) == []


def test_no_clusters_no_columns():
    assert classify_columns(PointCloud(np.zeros((0, 3))), []) == []


def test_single_wall_plane():
    rng = np.random.default_rng(0)
    cloud = _vertical_wall(rng, (0, 0), (0, 4), 3.0, [1.0, 0.0, 0.0])
    walls = extract_wall_planes(cloud)
    assert len(walls) == 1
    assert np.allclose(walls[0].plane.coefficients(), [1.0, 0.0, 0.0, 0.0], atol=1e-6)
    assert walls[0].instance_id == "wall_00"


def test_narrow_dense_patch_does_not_stop_wall_search():
    rng = np.random.default_rng(2)
    patch = _vertical_wall(rng, (0, 0), (0, 0.6), 3.0, [1.0, 0.0, 0.0], density=2000.0)
    wall = _vertical_wall(rng, (2, 5), (6, 5), 3.0, [0.0, -1.0, 0.0])
    cloud = PointCloud(np.vstack([patch.points, wall.points]), np.vstack([patch.normals, wall.normals]))
    walls = extract_wall_planes(cloud)
    assert len(walls) == 1
    assert abs(walls[0].plane.normal[1]) > 0.99
    assert walls[0].indices.min() >= len(patch)


def test_corner_gives_two_orthogonal_walls():
    rng = np.random.default_rng(1)
    a = _vertical_wall(rng, (0, 0), (0, 4), 3.0, [1.0, 0.0, 0.0])
    b = _vertical_wall(rng, (0, 0), (4, 0), 3.0, [0.0, 1.0, 0.0])
    cloud = PointCloud(np.vstack([a.points, b.points]), np.vstack([a.normals, b.normals]))
    walls = extract_wall_planes(cloud)
    assert len(walls) == 2
    cos = abs(float(walls[0].plane.normal @ walls[1].plane.normal))
    assert cos < math.sin(math.radians(2.0))
    assert not set(walls[0].indices.tolist()) & set(walls[1].indices.tolist())


def test_horizontal_slab_has_no_walls():
    pts = _grid_plane(1.0)
    cloud = PointCloud(pts, np.tile([0.0, 0.0, 1.0], (len(pts), 1)))
    assert extract_wall_planes(cloud) == []


def test_segmentation_of_small_facility_is_disjoint(small_facility):
    instances = segment_structures(small_facility.cloud, PerceptionConfig())
    kinds = [inst.kind for inst in instances]
    assert kinds[0] is StructureKind.GROUND
    assert StructureKind.ROOF in kinds
    assert kinds.count(StructureKind.WALL) == 4
    columns = [inst for inst in instances if inst.kind is StructureKind.COLUMN]
    assert len(columns) == 1
    assert np.allclose(columns[0].column.center, [4.0, 3.0], atol=0.1)
    seen = np.concatenate([inst.indices for inst in instances])
    assert len(seen) == len(np.unique(seen))



def test_ground_and_roof_recover_the_generator_labels(small_facility):
    cloud = small_facility.cloud
    instances = segment_structures(cloud)
    found = np.zeros(len(cloud), dtype=bool)
    for inst in instances:
        if inst.kind in (StructureKind.GROUND, StructureKind.ROOF):
            found[inst.indices] = True
    truth = np.isin(cloud.labels, [GROUND_LABEL, ROOF_LABEL])
    assert np.all(found[truth])
    assert np.count_nonzero(truth[found]) >= 0.99 * np.count_nonzero(found)
