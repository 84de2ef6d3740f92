import numpy as np
import pytest
from engine.evaluation import EvalReport, InspectionOutcome
from engine.geometry import PointCloud, VoxelGrid, VoxelState
from engine.io import read_pgm, read_ply, read_table, write_pgm, write_ply, write_table
from engine.perception import ColumnAxis, Plane, StructureInstance, StructureKind
from engine.persistence import RunStore, read_image_dir, top_view
from engine.scan_planning import ScanPath


def _cloud() -> PointCloud:
    rng = np.random.default_rng(3)
    normals = rng.normal(size=(5, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(rng.uniform(0.0, 5.0, (5, 3)), normals, np.array([0, 1000, 2000, 3000, 3001]))


def test_ply_keeps_normals_and_labels(tmp_path):
    cloud = _cloud()
    write_ply(tmp_path / "scene.ply", cloud)
    back = read_ply(tmp_path / "scene.ply")
    assert np.allclose(back.points, cloud.points, atol=1e-6)
    assert np.allclose(back.normals, cloud.normals, atol=1e-5)
    assert back.labels.tolist() == [0, 1000, 2000, 3000, 3001]


def test_ply_without_extras(tmp_path):
    write_ply(tmp_path / "bare.ply", PointCloud(np.array([[1.0, 2.0, 3.0]])))
    back = read_ply(tmp_path / "bare.ply")
    assert back.normals is None and back.labels is None


def test_ply_rejects_other_files(tmp_path):
    target = tmp_path / "notes.ply"
    target.write_text("hello\n", encoding="utf-8")
    with pytest.raises(ValueError, match="not a PLY"):
        read_ply(target)
    short = tmp_path / "short.ply"
    short.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n", encoding="utf-8")
    with pytest.raises(ValueError, match="expected 3"):
        read_ply(short)


@pytest.mark.parametrize("ascii_format", [False, True])
def test_pgm_levels(tmp_path, ascii_format):
    image = np.array([[0.0, 1.0, 0.5], [1.0, 0.0, 0.25]])
    write_pgm(tmp_path / "img.pgm", image, ascii_format=ascii_format)
    back = read_pgm(tmp_path / "img.pgm")
    assert back.shape == (2, 3)
    assert np.allclose(back, np.rint(image * 255) / 255)


def test_pgm_comments_and_errors(tmp_path):
    target = tmp_path / "c.pgm"
    target.write_bytes(b"P2\n# made by hand\n2 1\n10\n0 10\n")
    assert np.allclose(read_pgm(target), [[0.0, 1.0]])
    target.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_pgm(target)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros(4))


def test_table_writes_bools_as_digits(tmp_path):
    write_table(tmp_path / "t.csv", ["a", "ok"], [(1.5, True), (2.0, False)])
    header, data = read_table(tmp_path / "t.csv")
    assert header == ["a", "ok"]
    assert data.tolist() == [[1.5, 1.0], [2.0, 0.0]]
    assert (tmp_path / "t.csv").read_text(encoding="utf-8").splitlines()[1] == "1.500000,1"


def test_instances_survive_the_store(tmp_path):
    store = RunStore(tmp_path / "run")
    wall = StructureInstance(StructureKind.WALL, [0, 1, 2], plane=Plane.from_normal(np.array([0.0, 1.0, 0.0]), -2.0, [0, 1, 2]), instance_id="wall_00")
    column = StructureInstance(StructureKind.COLUMN, [3, 4], column=ColumnAxis(np.array([4.0, 3.0]), 0.0, 4.0, 0.3), instance_id="column_00")
    store.write_instances([wall, column])
    back = store.read_instances()
    assert [i.instance_id for i in back] == ["wall_00", "column_00"]
    assert back[0].plane.d == pytest.approx(-2.0)
    assert back[0].indices.tolist() == [0, 1, 2]
    assert np.allclose(back[1].column.center, [4.0, 3.0])
    assert back[1].column.radius == pytest.approx(0.3)


def test_spiral_paths_regain_their_center(tmp_path):
    store = RunStore(tmp_path)
    column = StructureInstance(StructureKind.COLUMN, [0], column=ColumnAxis(np.array([1.0, 1.0]), 0.0, 3.0, 0.3), instance_id="column_00")
    pts = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.2]])
    store.write_path(ScanPath(pts, np.array([np.pi, -np.pi / 2]), "column_00", "spiral", column.column.center))
    paths = store.read_paths([column])
    assert paths["column_00"].kind == "spiral"
    assert np.allclose(paths["column_00"].center, [1.0, 1.0])
    assert np.allclose(paths["column_00"].positions, pts)


def test_report_defaults_when_missing(tmp_path):
    store = RunStore(tmp_path)
    assert store.read_report() == EvalReport()
    report = EvalReport(profile="desk", inspections=[InspectionOutcome(instance="wall_00", kind="wall", success=True)])
    store.write_report(report)
    assert store.read_report() == report


def test_top_view_levels():
    grid = VoxelGrid(1.0)
    grid.set((0, 0, 0), VoxelState.OBSTACLE)
    grid.set((0, 0, 1), VoxelState.FREE)
    grid.set((1, 0, 0), VoxelState.INFLATED)
    grid.set((1, 1, 0), VoxelState.FREE)
    image = np.rint(top_view(grid) * 255).astype(int)
    assert image.tolist() == [[176, 255], [0, 96]]


def test_top_view_of_empty_grid():
    assert top_view(VoxelGrid(0.2)).shape == (1, 1)


def test_grid_files(tmp_path):
    store = RunStore(tmp_path)
    grid = VoxelGrid(1.0)
    grid.set((2, 1, 0), VoxelState.OBSTACLE)
    store.write_grid("world", grid)
    header, data = read_table(tmp_path / "grids" / "world.csv")
    assert header == ["Lx", "Ly", "Lz", "state"]
    assert data.tolist() == [[2.0, 1.0, 0.0, float(VoxelState.OBSTACLE)]]
    assert read_pgm(tmp_path / "grids" / "world.pgm").shape == (1, 1)


def test_image_dir(tmp_path):
    store = RunStore(tmp_path)
    store.write_image("b", np.full((4, 4), 0.5))
    store.write_image("a", np.zeros((4, 4)))
    images = read_image_dir(store.images_dir)
    assert list(images) == ["a.pgm", "b.pgm"]
    with pytest.raises(FileNotFoundError):
        read_image_dir(tmp_path / "absent")
