import numpy as np
import pytest
from engine.facility import (
    COLUMN_LABEL,
    GROUND_LABEL,
    ROOF_LABEL,
    WALL_LABEL,
    FacilitySpec,
    WallSegment,
    gen_facility,
    is_column,
    is_wall,
)
from pydantic import ValidationError
from tests.conftest import small_spec


def test_labels_of_small_facility(small_facility):
    labels = set(np.unique(small_facility.cloud.labels).tolist())
    assert labels == {GROUND_LABEL, ROOF_LABEL, WALL_LABEL, WALL_LABEL + 1, WALL_LABEL + 2, WALL_LABEL + 3, COLUMN_LABEL}


def test_floor_sampling_skips_the_column(small_facility):
    cloud = small_facility.cloud
    floor = cloud.points[cloud.labels == GROUND_LABEL]
    assert 4700 < len(floor) <= 4800
    assert np.all(np.linalg.norm(floor[:, :2] - [4.0, 3.0], axis=1) > 0.3)
    assert np.allclose(floor[:, 2], 0.0)


def test_wall_normals_face_the_interior(small_facility):
    cloud = small_facility.cloud
    south = cloud.normals[cloud.labels == WALL_LABEL]
    assert np.allclose(south, [0.0, 1.0, 0.0])
    west = cloud.normals[cloud.labels == WALL_LABEL + 3]
    assert np.allclose(west, [1.0, 0.0, 0.0])


def test_column_points_lie_on_the_surface(small_facility):
    cloud = small_facility.cloud
    col = cloud.points[cloud.labels == COLUMN_LABEL]
    assert np.allclose(np.linalg.norm(col[:, :2] - [4.0, 3.0], axis=1), 0.3)


def test_column_layout():
    spec = FacilitySpec()
    assert spec.column_count == 6
    assert np.allclose(spec.column_centers(), [[5, 4], [10, 4], [15, 4], [5, 8], [10, 8], [15, 8]])
    assert spec.column_spacing == pytest.approx(4.0)
    assert np.allclose(small_spec().column_centers(), [[4.0, 3.0]])
    assert small_spec(column_rows=0).column_centers().shape == (0, 2)


def test_voxelized_occupancy(small_facility):
    world = small_facility.world
    points = np.array(
        [
            [4.0, 3.0, 1.5],
            [2.0, 2.0, 1.5],
            [0.05, 3.0, 1.5],
            [2.0, 2.0, 0.02],
            [2.0, 2.0, 3.02],
        ]
    )
    assert world.occupied(points).tolist() == [True, False, True, True, True]


def test_zero_length_segment_is_rejected():
    with pytest.raises(ValidationError):
        FacilitySpec(walls=[WallSegment(start=(1.0, 1.0), end=(1.0, 1.0))])


def test_extra_wall_gets_its_own_label():
    facility = gen_facility(small_spec(walls=[WallSegment(start=(2.0, 1.0), end=(2.0, 5.0))]))
    assert WALL_LABEL + 4 in set(facility.cloud.labels.tolist())
    assert facility.world.occupied(np.array([[1.95, 3.0, 1.5]]))[0]


def test_generation_is_deterministic():
    a = gen_facility(small_spec(noise=0.01))
    b = gen_facility(small_spec(noise=0.01))
    assert np.array_equal(a.cloud.points, b.cloud.points)


def test_label_predicates():
    labels = np.array([GROUND_LABEL, ROOF_LABEL, WALL_LABEL, WALL_LABEL + 5, COLUMN_LABEL + 2])
    assert is_wall(labels).tolist() == [False, False, True, True, False]
    assert is_column(labels).tolist() == [False, False, False, False, True]
