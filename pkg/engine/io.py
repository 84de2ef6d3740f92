"""Console backend and the plain-text file codecs used by the run directory."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from .geometry import PointCloud, VoxelGrid
from .interfaces import IOBackend


class ConsoleIO(IOBackend):
    """Write to stdout."""

    def output(self, text: str) -> None:
        print(text)


def write_ply(path: Path, cloud: PointCloud) -> None:
    """Write ``cloud`` as ASCII PLY with optional normals and integer labels."""
    props = ["x", "y", "z"]
    columns = [cloud.points]
    fmt = ["%.6f"] * 3
    if cloud.normals is not None:
        props += ["nx", "ny", "nz"]
        columns.append(cloud.normals)
        fmt += ["%.6f"] * 3
    if cloud.labels is not None:
        props.append("label")
        columns.append(cloud.labels.reshape(-1, 1).astype(float))
        fmt.append("%d")
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    for name in props:
        header.append(f"property {'int' if name == 'label' else 'float'} {name}")
    header.append("end_header")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(header) + "\n")
        if len(cloud):
            np.savetxt(fh, np.hstack(columns), fmt=fmt, delimiter=" ")


def read_ply(path: Path) -> PointCloud:
    """Read an ASCII PLY written by :func:`write_ply` (or any x y z [nx ny nz] file)."""
    with open(path, encoding="utf-8") as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"'{path.name}' is not a PLY file")
        props: list[str] = []
        count = 0
        while line := fh.readline():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise ValueError(f"'{path.name}': only ASCII PLY is supported")
            if parts[0] == "element" and parts[1] == "vertex":
                count = int(parts[2])
            elif parts[0] == "property":
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        data = np.loadtxt(fh, ndmin=2) if count else np.zeros((0, len(props)))
    if data.shape[0] != count:
        raise ValueError(f"'{path.name}': expected {count} vertices, found {data.shape[0]}")
    col = {name: i for i, name in enumerate(props)}
    points = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if all(k in col for k in ("nx", "ny", "nz")):
        normals = data[:, [col["nx"], col["ny"], col["nz"]]]
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    labels = data[:, col["label"]].astype(np.int64) if "label" in col else None
    return PointCloud(points, normals, labels)


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    """Write a comma-separated table with a header row."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(value: object) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float | np.floating):
        return f"{float(value):.6f}"
    return str(value)


def read_table(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return header, data


def write_voxel_csv(path: Path, grid: VoxelGrid) -> None:
    """Rows ``Lx,Ly,Lz,state`` in key order."""
    rows = sorted(grid.items())
    write_table(path, ["Lx", "Ly", "Lz", "state"], ((k[0], k[1], k[2], s) for k, s in rows))


def write_path_csv(path: Path, positions: np.ndarray, yaws: np.ndarray) -> None:
    write_table(path, ["x", "y", "z", "yaw"], (tuple(p) + (float(y),) for p, y in zip(positions.tolist(), yaws.tolist(), strict=True)))


def write_pgm(path: Path, image: np.ndarray, *, ascii_format: bool = False) -> None:
    """Write a 2-D array with values in [0, 1] as an 8-bit PGM."""
    arr = np.asarray(image, dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError("PGM image must be a non-empty 2-D array")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    if ascii_format:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"P2\n{w} {h}\n255\n")
            np.savetxt(fh, pixels, fmt="%d")
        return
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Read a P2 or P5 PGM into a float array scaled to [0, 1]."""
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"'{path.name}': truncated PGM header")
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        if maxval > 255:
            raise ValueError(f"'{path.name}': only 8-bit PGM is supported")
        data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    elif magic == b"P2":
        data = np.array(raw[pos:].split(), dtype=np.int64)[: w * h]
    else:
        raise ValueError(f"'{path.name}' is not a PGM file")
    if data.size != w * h:
        raise ValueError(f"'{path.name}': expected {w * h} pixels, found {data.size}")
    return data.reshape(h, w).astype(float) / float(maxval)


__all__ = [
    "ConsoleIO",
    "read_pgm",
    "read_ply",
    "read_table",
    "write_path_csv",
    "write_pgm",
    "write_ply",
    "write_table",
    "write_voxel_csv",
]
