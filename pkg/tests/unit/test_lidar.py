import numpy as np
import pytest
from engine.lidar import LidarConfig, SimLidar, beam_directions

ORIGIN = np.array([4.0, 1.0, 1.5])


def test_default_fan_has_ninety_by_twelve_beams():
    dirs = beam_directions(LidarConfig())
    assert dirs.shape == (90 * 12, 3)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0)


def test_single_vertical_beam_uses_lower_angle():
    dirs = beam_directions(LidarConfig(vertical_beams=1, vertical_min_deg=0.0))
    assert np.allclose(dirs[:, 2], 0.0)


def test_cast_distance_to_wall(small_facility):
    world = small_facility.world
    dist = world.cast(ORIGIN, np.array([[-1.0, 0.0, 0.0]]), 40.0)
    assert dist[0] == pytest.approx(3.9, abs=0.05)


def test_cast_hits_the_column(small_facility):
    dist = small_facility.world.cast(ORIGIN, np.array([[0.0, 1.0, 0.0]]), 40.0)
    assert dist[0] == pytest.approx(1.7, abs=0.05)


def test_cast_beyond_range_is_inf(small_facility):
    dist = small_facility.world.cast(ORIGIN, np.array([[-1.0, 0.0, 0.0]]), 2.0)
    assert np.isinf(dist[0])


def test_points_outside_the_lattice_are_free(small_facility):
    assert not small_facility.world.occupied(np.array([[100.0, 0.0, 0.0]]))[0]


def test_closed_room_returns_every_beam(small_facility):
    lidar = SimLidar(small_facility.world)
    frame = lidar.scan(ORIGIN)
    assert len(frame) == 90 * 12
    world = small_facility.world
    assert np.all(frame.points >= world.lower) and np.all(frame.points <= world.upper)
    assert lidar.period == pytest.approx(0.1)


def test_short_range_sees_nothing(small_facility):
    lidar = SimLidar(small_facility.world, LidarConfig(max_range=0.5))
    assert len(lidar.scan(ORIGIN)) == 0


def test_range_noise_is_seeded(small_facility):
    config = LidarConfig(range_noise=0.01)
    a = SimLidar(small_facility.world, config, seed=4).scan(ORIGIN)
    b = SimLidar(small_facility.world, config, seed=4).scan(ORIGIN)
    assert np.array_equal(a.points, b.points)
