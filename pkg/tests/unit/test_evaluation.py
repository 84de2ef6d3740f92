import numpy as np
import pytest
from engine.evaluation import (
    EvalReport,
    InspectionOutcome,
    MatchCounts,
    PlannerRow,
    eval_f1,
    eval_tracking,
    eval_wall_fraction,
    match_centers,
)
from engine.facility import COLUMN_LABEL, GROUND_LABEL, WALL_LABEL
from engine.perception import ColumnAxis, Plane, StructureInstance, StructureKind


def _column(center, instance_id="column_00") -> StructureInstance:
    return StructureInstance(StructureKind.COLUMN, [0], column=ColumnAxis(np.asarray(center, float), 0.0, 3.0, 0.3), instance_id=instance_id)


def test_match_counts_scores():
    counts = MatchCounts(3, 1, 2)
    assert counts.precision == pytest.approx(0.75)
    assert counts.recall == pytest.approx(0.6)
    assert counts.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    assert MatchCounts(0, 0, 0).f1 == 0.0


def test_match_centers_is_one_to_one():
    pred = np.array([[0.0, 0.0], [0.1, 0.0]])
    truth = np.array([[0.05, 0.0]])
    assert match_centers(pred, truth, 1.0) == MatchCounts(1, 1, 0)
    assert match_centers(np.zeros((0, 2)), truth, 1.0) == MatchCounts(0, 0, 1)


def test_eval_f1_uses_half_the_spacing():
    points = np.array([[4.0, 3.0, 0.0], [10.0, 3.0, 0.0], [0.0, 0.0, 0.0]])
    labels = np.array([COLUMN_LABEL, COLUMN_LABEL + 1, GROUND_LABEL])
    near = [_column([4.1, 3.0]), _column([10.0, 5.5], "column_01")]
    counts = eval_f1(near, points, labels, 4.0)
    assert counts == MatchCounts(1, 1, 1)
    far = [_column([4.1, 3.0]), _column([10.0, 4.5], "column_01")]
    assert eval_f1(far, points, labels, 4.0).f1 == 1.0


def test_wall_fraction():
    labels = np.array([WALL_LABEL, WALL_LABEL, WALL_LABEL + 1, WALL_LABEL + 1, GROUND_LABEL])
    plane = Plane.from_normal(np.array([1.0, 0.0, 0.0]), 0.0, [0, 1, 2])
    wall = StructureInstance(StructureKind.WALL, [0, 1, 2], plane=plane, instance_id="wall_00")
    assert eval_wall_fraction([wall], labels) == pytest.approx(0.75)
    assert eval_wall_fraction(np.array([0, 0, 4]), labels) == pytest.approx(0.25)
    assert eval_wall_fraction([], np.array([GROUND_LABEL])) == 1.0


def test_tracking_stats():
    t = np.arange(5, dtype=float)
    ref = np.column_stack([t, np.zeros(5), np.zeros(5)])
    exe = ref + [0.0, 0.1, 0.0]
    stats = eval_tracking(t, ref, exe, window=1.0)
    assert stats.ape_max == pytest.approx(0.1)
    assert stats.ape_rmse == pytest.approx(0.1)
    assert stats.rpe_max == pytest.approx(0.0)


def test_tracking_drift_shows_in_relative_error():
    t = np.arange(5, dtype=float)
    ref = np.column_stack([t, np.zeros(5), np.zeros(5)])
    exe = np.column_stack([1.1 * t, np.zeros(5), np.zeros(5)])
    stats = eval_tracking(t, ref, exe, window=1.0)
    assert stats.rpe_max == pytest.approx(0.1)
    assert stats.ape_max == pytest.approx(0.4)


def test_tracking_rejects_misaligned_input():
    with pytest.raises(ValueError):
        eval_tracking(np.arange(3.0), np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        eval_tracking(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))


def test_report_success_share_and_timing_free_copy():
    report = EvalReport(
        planner=[PlannerRow(scenario="a", t_g=1.0, t_opt=2.0, t_astar=3.0, distance=2.0, length=2.0, success=True)],
        inspections=[
            InspectionOutcome(instance="column_00", kind="column", success=True),
            InspectionOutcome(instance="wall_00", kind="wall"),
        ],
    )
    assert report.inspection_success == pytest.approx(0.5)
    stripped = report.without_timings()
    assert stripped.planner[0].t_g == 0.0 and stripped.planner[0].t_astar == 0.0
    assert stripped.planner[0].length == 2.0
    assert report.planner[0].t_g == 1.0
    assert EvalReport().inspection_success == 0.0
