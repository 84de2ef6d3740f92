import shutil
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.append(str(ROOT_DIR))

from engine.facility import FacilitySpec, gen_facility  # noqa: E402
from engine.geometry import PointCloud  # noqa: E402
from engine.interfaces import IOBackend  # noqa: E402


class DummyIO(IOBackend):
    def __init__(self) -> None:
        self.outputs: list[str] = []

    def output(self, text: str) -> None:
        self.outputs.append(text)


@pytest.fixture
def io_backend() -> DummyIO:
    return DummyIO()


@pytest.fixture
def data_dir(tmp_path):
    """Copy of the shipped profiles so tests may add documents next to them."""
    target = tmp_path / "data"
    shutil.copytree(ROOT_DIR / "data" / "profiles", target / "profiles")
    return target


def small_spec(**overrides) -> FacilitySpec:
    values = {"length": 8.0, "width": 6.0, "height": 3.0, "column_rows": 1, "column_cols": 1, "seed": 0}
    values.update(overrides)
    return FacilitySpec(**values)


@pytest.fixture(scope="module")
def small_facility():
    return gen_facility(small_spec())


def plane_points(rng, origin, u, v, size_u, size_v, density=200.0) -> np.ndarray:
    count = int(size_u * size_v * density)
    s = rng.uniform(0.0, size_u, count)
    t = rng.uniform(0.0, size_v, count)
    return np.asarray(origin, float) + s[:, None] * np.asarray(u, float) + t[:, None] * np.asarray(v, float)


def box_room(seed: int = 0, size=(6.0, 4.0, 3.0), density: float = 200.0) -> PointCloud:
    """Randomly sampled inner faces of a closed rectangular room."""
    rng = np.random.default_rng(seed)
    lx, ly, lz = size
    ex, ey, ez = np.eye(3)
    faces = [
        plane_points(rng, (0, 0, 0), ex, ey, lx, ly, density),
        plane_points(rng, (0, 0, lz), ex, ey, lx, ly, density),
        plane_points(rng, (0, 0, 0), ex, ez, lx, lz, density),
        plane_points(rng, (0, ly, 0), ex, ez, lx, lz, density),
        plane_points(rng, (0, 0, 0), ey, ez, ly, lz, density),
        plane_points(rng, (lx, 0, 0), ey, ez, ly, lz, density),
    ]
    return PointCloud(np.concatenate(faces))


@pytest.fixture(scope="module")
def room_cloud() -> PointCloud:
    return box_room()
