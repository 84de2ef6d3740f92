import math

import numpy as np
import pytest
from engine.geometry import VoxelGrid, VoxelState
from engine.trajectory import (
    BSplineTrajectory,
    EscapeAnchors,
    FlatOutput,
    MavSimState,
    ObstacleIndex,
    OptWeights,
    SimSettings,
    TrackerGains,
    bspline_dynamics,
    collision_distance,
    collision_penalty,
    cost_and_grad,
    feasibility_penalty,
    optimize,
    simulate_flight,
    track_step,
)
from pydantic import ValidationError


def _line(count: int, spacing: float, dt: float, z: float = 1.0) -> BSplineTrajectory:
    x = spacing * np.arange(count, dtype=float)
    return BSplineTrajectory(np.column_stack([x, np.zeros(count), np.full(count, z)]), dt)


def test_dynamics_of_two_points():
    v, a, j = bspline_dynamics(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), 0.5)
    assert np.allclose(v, [[2.0, 0.0, 0.0]])
    assert a.shape == (0, 3)
    assert j.shape == (0, 3)


def test_equally_spaced_points_have_no_acceleration():
    v, a, j = bspline_dynamics(_line(8, 0.3, 0.5))
    assert np.allclose(v[:, 0], 0.6)
    assert np.allclose(a, 0.0)
    assert np.allclose(j, 0.0)


def test_spline_needs_enough_control_points():
    with pytest.raises(ValueError):
        BSplineTrajectory(np.zeros((3, 3)), 0.5)


def test_spline_starts_at_the_second_control_point_of_a_line():
    traj = _line(8, 1.0, 0.5)
    assert np.allclose(traj.evaluate(traj.t_start), [1.0, 0.0, 1.0])
    assert traj.duration == pytest.approx(2.5)
    assert traj.length() == pytest.approx(5.0, rel=1e-3)


def test_collision_distance():
    assert collision_distance([1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]) == pytest.approx(1.0)
    assert collision_distance([1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 2.0, 0.0]) == pytest.approx(1.0)
    assert collision_distance([1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]) == 0.0


def test_straight_line_within_limits_costs_nothing():
    cost, grad = cost_and_grad(_line(10, 0.3, 0.5), EscapeAnchors.empty(), OptWeights())
    assert cost == pytest.approx(0.0)
    assert np.allclose(grad, 0.0)


@pytest.mark.parametrize("strict", [False, True])
def test_collision_penalty_is_continuous_at_safety_distance(strict):
    s = 0.5
    below, _ = collision_penalty(np.array([s - 1e-9]), s, strict=strict)
    above, _ = collision_penalty(np.array([s + 1e-9]), s, strict=strict)
    assert below[0] == pytest.approx(above[0], abs=1e-6)


def test_collision_penalty_vanishes_beyond_the_band():
    value, grad = collision_penalty(np.array([0.76, 2.0]), 0.5)
    assert np.all(value == 0.0)
    assert np.all(grad == 0.0)
    inner, _ = collision_penalty(np.array([0.0]), 0.5)
    assert inner[0] == pytest.approx(0.125)


def test_collision_band_is_a_tapered_squared_gap():
    s = 0.5
    d = np.linspace(s + 0.01, 1.5 * s - 0.01, 7)
    value, grad = collision_penalty(d, s)
    taper = (1.5 * s - d) / (0.5 * s)
    assert np.allclose(value, 3.0 * (s - d) ** 2 * taper**2)
    h = 1e-6
    numeric = (collision_penalty(d + h, s)[0] - collision_penalty(d - h, s)[0]) / (2 * h)
    assert np.allclose(grad, numeric, atol=1e-5)
    edge, _ = collision_penalty(np.array([1.5 * s - 1e-6]), s)
    assert edge[0] < 1e-9


def test_feasibility_penalty_regions():
    v_max = 2.0
    value, _ = feasibility_penalty(np.array([1.0, 3.0, 2.5 * v_max, -2.5 * v_max]), v_max)
    assert value[0] == 0.0
    assert value[1] == pytest.approx(1.0)
    assert value[2] == pytest.approx(6.25 * v_max**2)
    assert value[3] == pytest.approx(6.25 * v_max**2)


@pytest.mark.parametrize("seed", range(50))
def test_cost_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    q = np.cumsum(rng.normal(scale=0.4, size=(9, 3)), axis=0)
    traj = BSplineTrajectory(q, 0.5)
    directions = np.array([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]])
    depth = np.array([0.3, 0.6])
    idx = np.array([3, 5])
    anchors = EscapeAnchors(idx, q[idx] - depth[:, None] * directions, directions)
    weights = OptWeights()
    _, grad = cost_and_grad(traj, anchors, weights)
    eps = 1e-6
    numeric = np.zeros_like(q)
    for i in range(q.shape[0]):
        for k in range(3):
            plus, minus = q.copy(), q.copy()
            plus[i, k] += eps
            minus[i, k] -= eps
            numeric[i, k] = (
                cost_and_grad(traj.with_control_points(plus), anchors, weights)[0]
                - cost_and_grad(traj.with_control_points(minus), anchors, weights)[0]
            ) / (2 * eps)
    assert np.allclose(grad, numeric, rtol=1e-4, atol=1e-4)


def test_optimal_line_barely_moves():
    traj = _line(10, 0.3, 0.5)
    result = optimize(traj, None, OptWeights())
    assert result.feasible
    assert np.allclose(result.trajectory.control_points, traj.control_points, atol=1e-6)


def test_overspeed_is_removed():
    x = np.array([0.0, 1.0, 2.0, 3.0, 5.0, 5.5, 6.0, 7.0, 8.0, 9.0])
    traj = BSplineTrajectory(np.column_stack([x, np.zeros(10), np.ones(10)]), 0.5)
    v, _, _ = bspline_dynamics(traj)
    assert np.max(np.abs(v)) > OptWeights().v_max
    result = optimize(traj, None, OptWeights())
    v, _, _ = bspline_dynamics(result.trajectory)
    assert np.max(np.abs(v)) <= OptWeights().v_max + 1e-3
    assert np.allclose(result.trajectory.control_points[:3], traj.control_points[:3])
    assert np.allclose(result.trajectory.control_points[-3:], traj.control_points[-3:])


def test_grazing_obstacle_pushes_the_path_away():
    grid = VoxelGrid(0.2)
    grid.set((25, 0, 5), VoxelState.OBSTACLE)
    traj = _line(12, 1.0, 1.0)
    index = ObstacleIndex(grid)
    before = float(index.nearest(traj.control_points)[0].min())
    result = optimize(traj, grid, OptWeights())
    after = float(index.nearest(result.trajectory.control_points)[0].min())
    assert before < 0.2
    assert after > before + 0.15
    assert np.allclose(result.trajectory.control_points[:3], traj.control_points[:3])


def test_hover_command():
    sim = MavSimState(np.array([0.0, 0.0, 1.0]))
    goal = FlatOutput(np.array([0.0, 0.0, 1.0]), np.zeros(3), np.zeros(3))
    cmd, thrust = track_step(goal, (sim.position, sim.velocity), TrackerGains(), sim)
    assert cmd.theta == pytest.approx(0.0)
    assert cmd.phi == pytest.approx(0.0)
    assert thrust == pytest.approx(9.81)


def test_feedforward_acceleration_maps_to_pitch():
    sim = MavSimState(np.zeros(3))
    goal = FlatOutput(np.zeros(3), np.zeros(3), np.array([0.981, 0.0, 0.0]))
    cmd, _ = track_step(goal, (sim.position, sim.velocity), TrackerGains(), sim)
    assert cmd.theta == pytest.approx(0.1)
    assert cmd.phi == pytest.approx(0.0)


def test_feedforward_respects_yaw():
    sim = MavSimState(np.zeros(3), psi=math.pi / 2)
    goal = FlatOutput(np.zeros(3), np.zeros(3), np.array([0.0, 0.981, 0.0]))
    cmd, _ = track_step(goal, (sim.position, sim.velocity), TrackerGains(), sim)
    assert cmd.theta == pytest.approx(0.1)
    assert cmd.phi == pytest.approx(0.0, abs=1e-12)


def test_position_error_uses_kp():
    sim = MavSimState(np.zeros(3))
    goal = FlatOutput(np.array([1.0, 0.0, 0.0]), np.zeros(3), np.zeros(3))
    cmd, _ = track_step(goal, (sim.position, sim.velocity), TrackerGains(), sim)
    assert cmd.theta == pytest.approx(6.0 / 9.81)


def test_stationary_goal_converges():
    traj = BSplineTrajectory(np.tile([1.0, 0.0, 1.0], (8, 1)), 0.5)
    sim = MavSimState(np.array([0.0, 0.0, 1.0]))
    log = simulate_flight(traj, sim, TrackerGains(), settings=SimSettings(settle_time=5.0))
    assert np.allclose(log.positions[-1], [1.0, 0.0, 1.0], atol=0.05)


def _straight_flight(speed: float) -> float:
    dt = 0.5
    spacing = speed * dt
    count = int(round(10.0 / spacing)) + 3
    traj = _line(count, spacing, dt)
    sim = MavSimState(traj.evaluate(traj.t_start), np.array([speed, 0.0, 0.0]))
    return simulate_flight(traj, sim, TrackerGains()).tracking_rmse()


def test_slow_straight_flight_tracks_closely():
    assert _straight_flight(0.5) < 0.1


def test_tracking_error_grows_with_speed():
    assert _straight_flight(2.0) > _straight_flight(0.5)


def test_simulator_step_limit():
    traj = _line(8, 0.3, 0.5)
    with pytest.raises(ValueError):
        simulate_flight(traj, MavSimState(np.zeros(3)), TrackerGains(), dt=0.02)
    with pytest.raises(ValidationError):
        SimSettings(dt=0.02)
