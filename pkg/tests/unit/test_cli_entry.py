import os
import subprocess
import sys
from pathlib import Path

from harness.main import run_cli


def _project_root(file: str) -> Path:
    p = Path(file).resolve()
    return p.parents[2] if p.parents[1].name == "tests" else p.parents[1]


def _small_config(tmp_path: Path) -> Path:
    path = tmp_path / "small.json"
    path.write_text('{"facility": {"length": 8.0, "width": 6.0, "height": 3.0, "column_rows": 1, "column_cols": 1}}', encoding="utf-8")
    return path


def test_cli_module_entry(tmp_path):
    env = os.environ.copy()
    env["PYTHONPATH"] = str(_project_root(__file__))
    result = subprocess.run(  # noqa: S603
        [sys.executable, "-m", "harness.main", "gen", "--config", str(_small_config(tmp_path)), "--run-dir", "out"],
        text=True,
        cwd=tmp_path,
        env=env,
        capture_output=True,
        check=False,
    )
    assert result.returncode == 0
    assert result.stdout.startswith("gen: ")
    assert (tmp_path / "out" / "scene.ply").exists()
    assert (tmp_path / "out" / "report.json").exists()


def test_debug_file_receives_traces(tmp_path, capsys):
    log = tmp_path / "debug.txt"
    run_cli(["gen", "--config", str(_small_config(tmp_path)), "--run-dir", str(tmp_path / "run"), "--seed", "4", "--debug", str(log)])
    out = capsys.readouterr().out
    text = log.read_text(encoding="utf-8")
    assert out.startswith("gen: ")
    assert "gen: " in text
    assert "pipeline.py:" in text
    assert "-- pipeline profile desk seed 4 odometry truth" in text


def test_plan_needs_segment(tmp_path, capsys):
    try:
        run_cli(["plan", "--run-dir", str(tmp_path / "empty"), "--config", str(_small_config(tmp_path))])
        raised = False
    except SystemExit:
        raised = True
    assert raised
    assert "run 'segment' first" in capsys.readouterr().out
