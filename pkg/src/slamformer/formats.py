"""TUM trajectory text files and binary PLY point clouds."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataIOError
from .geometry import SE3Pose


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ContractError("trajectory timestamps and poses differ in length")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([g.translation for g in self.poses]).reshape(-1, 3)

    @property
    def quaternions(self) -> np.ndarray:
        return np.array([g.rotation for g in self.poses]).reshape(-1, 4)


def _fmt(v: float) -> str:
    return f"{float(v) + 0.0:.9g}"


def format_pose_line(ts: float, g: SE3Pose) -> str:
    vals = list(g.translation) + list(g.rotation)
    return f"{ts:.9f} " + " ".join(_fmt(v) for v in vals)


def write_trajectory(traj: Trajectory, path) -> None:
    """TUM format, one ``timestamp tx ty tz qx qy qz qw`` line per pose."""
    if len(traj) == 0:
        raise ContractError("refusing to write an empty trajectory")
    text = "".join(format_pose_line(t, g) + "\n" for t, g in zip(traj.timestamps, traj.poses))
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise DataIOError(f"cannot write trajectory {path}: {e}") from e


def parse_trajectory(text: str) -> Trajectory:
    ts, poses = [], []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise DataIOError(f"line {n}: expected 8 fields, got {len(parts)}")
        v = [float(p) for p in parts]
        ts.append(v[0])
        poses.append(SE3Pose(v[4:8], v[1:4]))
    return Trajectory(np.array(ts), poses)


def read_trajectory(path) -> Trajectory:
    try:
        return parse_trajectory(Path(path).read_text())
    except OSError as e:
        raise DataIOError(f"cannot read trajectory {path}: {e}") from e


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                    ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def write_ply(path, points, colors=None) -> None:
    """Binary little-endian PLY with float32 xyz and uchar rgb."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if colors is None:
        colors = np.full(points.shape, 200, dtype=np.uint8)
    colors = np.asarray(colors)
    if colors.dtype != np.uint8:
        colors = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
    verts = np.empty(len(points), dtype=_VERTEX)
    verts["x"], verts["y"], verts["z"] = points.T.astype(np.float32)
    verts["red"], verts["green"], verts["blue"] = colors.reshape(-1, 3).T
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(points)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\n"
              "end_header\n")
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(verts.tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write point cloud {path}: {e}") from e


_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
              "short": "i2", "ushort": "u2", "int": "i4", "uint": "u4"}


def read_ply(path):
    """Read the vertex xyz (and rgb, if present) of a binary or ASCII PLY."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read point cloud {path}: {e}") from e
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise DataIOError(f"{path} is not a PLY file")
    body = raw.index(b"\n", end) + 1
    lines = raw[:body].decode("ascii").splitlines()
    fmt, count, props, in_vertex = None, 0, [], False
    for line in lines:
        tok = line.split()
        if tok[:1] == ["format"]:
            fmt = tok[1]
        elif tok[:1] == ["element"]:
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[:1] == ["property"] and in_vertex:
            if tok[1] == "list":
                raise DataIOError("list properties on vertices are not supported")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt == "ascii":
        data = np.loadtxt(raw[body:].decode().splitlines()[:count], ndmin=2)
        cols = {name: data[:, i] for i, (name, _) in enumerate(props)}
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        dt = np.dtype([(n, endian + t) for n, t in props])
        if len(raw) - body < dt.itemsize * count:
            raise DataIOError("truncated PLY body")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=body)
        cols = {n: arr[n] for n, _ in props}
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    rgb = None
    if all(c in cols for c in ("red", "green", "blue")):
        rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.uint8)
    return pts, rgb


def fuse_pointmaps(preds, poses, images=None, threshold: float = 1.5):
    """World-frame points from local pointmaps, keeping confidence > ``threshold``."""
    pts, cols = [], []
    for i, (p, g) in enumerate(zip(preds, poses)):
        keep = p.confidence > threshold
        world = g.apply(p.pointmap[keep].reshape(-1, 3))
        pts.append(world)
        if images is not None:
            cols.append(images[i][keep].reshape(-1, 3))
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    colors = np.concatenate(cols) if images is not None and cols else None
    return points, colors


def write_pointcloud(preds, poses, path, images=None, threshold: float = 1.5) -> int:
    if not preds:
        raise ContractError("point cloud needs at least one frame")
    points, colors = fuse_pointmaps(preds, poses, images, threshold)
    write_ply(path, points, colors)
    return len(points)
