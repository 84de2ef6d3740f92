import pytest
from engine.evaluation import EvalReport
from engine.pipeline import STAGES, Pipeline
from engine.persistence import RunStore

pytestmark = pytest.mark.slow


def _run(data_dir, run_dir, io_backend, stages, **kwargs) -> EvalReport:
    return Pipeline(data_dir, run_dir, "desk", io_backend=io_backend, **kwargs).run(stages)


def test_desk_segmentation_finds_every_column(data_dir, tmp_path, io_backend):
    report = _run(data_dir, tmp_path / "run", io_backend, ["gen", "segment"])
    assert report.segmentation_f1 == 1.0
    assert report.segmentation_precision == 1.0
    instances = RunStore(tmp_path / "run").read_instances()
    assert sum(1 for i in instances if i.kind.value == "column") == 6
    assert sum(1 for i in instances if i.kind.value == "wall") >= 4


def test_desk_plan_covers_every_structure(data_dir, tmp_path, io_backend):
    run_dir = tmp_path / "run"
    _run(data_dir, run_dir, io_backend, ["gen", "segment", "plan"])
    store = RunStore(run_dir)
    instances = [i for i in store.read_instances() if i.kind.value in ("wall", "column")]
    paths = store.read_paths(instances)
    assert set(paths) == {i.instance_id for i in instances}
    assert all(p.kind == "spiral" for name, p in paths.items() if name.startswith("column"))


def test_desk_all_inspects_everything(data_dir, tmp_path, io_backend):
    run_dir = tmp_path / "run"
    report = _run(data_dir, run_dir, io_backend, list(STAGES))
    assert report.errors == []
    assert report.inspections
    assert report.inspection_success == 1.0
    assert all(row.success for row in report.planner)
    assert report.quality
    assert report.localization_rmse is not None
    assert RunStore(run_dir).read_report() == report
    for name in ("scene.ply", "instances.json", "paths", "grids", "logs", "report.json"):
        assert (run_dir / name).exists()


def test_same_seed_same_report(data_dir, tmp_path, io_backend):
    stages = ["gen", "segment", "plan", "fly"]
    first = _run(data_dir, tmp_path / "a", io_backend, stages, seed=3)
    second = _run(data_dir, tmp_path / "b", io_backend, stages, seed=3)
    assert first.without_timings() == second.without_timings()
    for name in sorted(p.name for p in (tmp_path / "a" / "paths").iterdir()):
        assert (tmp_path / "a" / "paths" / name).read_bytes() == (tmp_path / "b" / "paths" / name).read_bytes()


def test_desk_estimation_stays_bounded_over_a_minute(data_dir, tmp_path, io_backend):
    override = tmp_path / "minute.yaml"
    override.write_text("estimation:\n  duration: 60.0\n", encoding="utf-8")
    report = _run(data_dir, tmp_path / "run", io_backend, ["gen", "estimate"], config_path=override)
    assert report.localization_rmse is not None
    assert report.localization_rmse < 0.2


def test_desk_exploration_is_monotone_and_stays_out_of_obstacles(data_dir, tmp_path, io_backend):
    run_dir = tmp_path / "run"
    pipeline = Pipeline(data_dir, run_dir, "desk", io_backend=io_backend)
    report = pipeline.run(["gen", "segment", "plan", "explore"])
    assert report.inspections
    world = pipeline.facility().world
    store = RunStore(run_dir)
    for outcome in report.inspections:
        history = outcome.alpha_history
        assert all(b >= a for a, b in zip(history, history[1:], strict=False))
        assert outcome.intrusions == 0
        if (store.logs_dir / f"flight_{outcome.instance}.csv").exists():
            _, rows = store.read_log(f"flight_{outcome.instance}")
            assert not world.occupied(rows[:, 1:4]).any()
