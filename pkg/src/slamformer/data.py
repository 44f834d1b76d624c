"""Sequence sources: TUM RGB-D directories and a z-buffered synthetic renderer."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataIOError
from .geometry import SE3Pose, quat_from_axis_angle
from .kernels import nearest_neighbors, zbuffer
from .losses import ClipTargets
from .model import ImageFrame

log = logging.getLogger(__name__)


@dataclass
class SequenceSource:
    kind: str
    frames: list
    gt_poses: list | None = None
    gt_depth: np.ndarray | None = None
    gt_pointmaps: np.ndarray | None = None
    valid: np.ndarray | None = None
    dropped: int = 0

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ContractError("frame timestamps must be strictly increasing")
        if self.gt_poses is not None and len(self.gt_poses) != len(self.frames):
            raise ContractError("one ground-truth pose per frame is required")

    def __len__(self):
        return len(self.frames)

    def has_training_targets(self) -> bool:
        return self.gt_poses is not None and self.gt_depth is not None and self.gt_pointmaps is not None

    def clip(self, start: int, length: int):
        """``(frames, ClipTargets)`` for frames ``start .. start+length-1``."""
        if not self.has_training_targets():
            raise ContractError("sequence lacks depth/pose ground truth")
        sl = slice(start, start + length)
        frames = self.frames[sl]
        if len(frames) != length:
            raise ContractError("clip runs past the end of the sequence")
        valid = None if self.valid is None else self.valid[sl]
        return frames, ClipTargets(self.gt_depth[sl], self.gt_pointmaps[sl], self.gt_poses[sl], valid)


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------

MOTIONS = ("zero", "x", "orbit", "wobble")


@dataclass(frozen=True)
class SyntheticSpec:
    num_frames: int = 20
    motion: str = "x"
    step: float = 0.05
    scene: str = "cards"
    image_hw: tuple = (32, 32)
    fps: float = 30.0
    start: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.num_frames < 1:
            raise ConfigError("num_frames must be >= 1")
        if self.motion not in MOTIONS:
            raise ConfigError(f"motion must be one of {MOTIONS}")
        if self.scene not in ("plane", "cards"):
            raise ConfigError("scene must be 'plane' or 'cards'")
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))

    @classmethod
    def parse(cls, text: str) -> "SyntheticSpec":
        """``"frames=20,motion=x,step=0.05,scene=cards,size=32"`` (all keys optional)."""
        kw = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "=" not in part:
                raise ConfigError(f"bad synthetic spec item {part!r}")
            k, v = (s.strip() for s in part.split("=", 1))
            if k in ("frames", "num_frames"):
                kw["num_frames"] = int(v)
            elif k == "motion":
                kw["motion"] = v
            elif k == "scene":
                kw["scene"] = v
            elif k in ("step", "fps"):
                kw[k] = float(v)
            elif k == "size":
                kw["image_hw"] = (int(v), int(v))
            elif k == "seed":
                continue
            else:
                raise ConfigError(f"unknown synthetic spec key {k!r}")
        return cls(**kw)


WALL_Z = 4.0
NEAR = 0.1


def _scene_points(scene: str, rng):
    """Coloured point grid: a back wall plus, for ``cards``, three nearer panels."""
    spacing = 0.04
    g = np.arange(-4.0, 4.0 + 1e-9, spacing)
    X, Y = np.meshgrid(g, g)
    pts = [np.stack([X.ravel(), Y.ravel(), np.full(X.size, WALL_Z)], 1)]
    if scene == "cards":
        for _ in range(3):
            cx, cy = rng.uniform(-1.0, 1.0, 2)
            z = rng.uniform(2.0, 3.2)
            half = rng.uniform(0.3, 0.6)
            h = np.arange(-half, half + 1e-9, 0.02)
            A, B = np.meshgrid(h, h)
            pts.append(np.stack([cx + A.ravel(), cy + B.ravel(), np.full(A.size, z)], 1))
    pts = np.concatenate(pts)
    freq = rng.normal(0, 3.0, (3, 3))
    phase = rng.uniform(0, 2 * np.pi, 3)
    colors = 0.5 + 0.5 * np.sin(pts @ freq.T + phase)
    return pts, np.clip(colors, 0.0, 1.0)


def camera_path(spec: SyntheticSpec):
    c0 = np.asarray(spec.start)
    poses = []
    for t in range(spec.num_frames):
        if spec.motion == "zero":
            q, c = [0, 0, 0, 1], c0
        elif spec.motion == "x":
            q, c = [0, 0, 0, 1], c0 + np.array([spec.step * t, 0, 0])
        elif spec.motion == "orbit":
            ang = 0.15 * np.sin(0.3 * t)
            q = quat_from_axis_angle([0, 1, 0], ang)
            c = c0 + np.array([spec.step * t, 0.3 * spec.step * np.sin(0.5 * t), 0.0])
        else:
            q = quat_from_axis_angle([0.2, 1, 0.1], 0.05 * np.sin(0.7 * t))
            c = c0 + np.array([spec.step * t, 0.0, 0.5 * spec.step * t])
        poses.append(SE3Pose(q, c))
    return poses


def intrinsics(image_hw):
    H, W = image_hw
    return float(W), float(W), W / 2.0, H / 2.0


def render(points, colors, pose: SE3Pose, image_hw):
    """Z-buffered projection. Returns ``(image, depth, local_pointmap, valid)``."""
    H, W = image_hw
    fx, fy, cx, cy = intrinsics(image_hw)
    local = pose.inverse().apply(points)
    z = local[:, 2]
    front = z > NEAR
    zs = np.where(front, z, 1.0)
    u = np.floor(fx * local[:, 0] / zs + cx).astype(np.int64)
    v = np.floor(fy * local[:, 1] / zs + cy).astype(np.int64)
    win = zbuffer(u, v, np.where(front, z, -1.0), H, W)
    valid = win >= 0
    idx = np.where(valid, win, 0)
    image = np.where(valid[..., None], colors[idx], 0.0)
    pmap = np.where(valid[..., None], local[idx], 0.0)
    return image, pmap[..., 2].copy(), pmap, valid


def generate_synthetic_sequence(spec: SyntheticSpec, seed: int = 0) -> SequenceSource:
    rng = np.random.default_rng(seed)
    points, colors = _scene_points(spec.scene, rng)
    poses = camera_path(spec)
    centers = np.array([g.translation for g in poses])
    dist, _ = nearest_neighbors(centers, points)
    if np.any(centers[:, 2] >= WALL_Z - NEAR) or np.any(dist < NEAR):
        raise ContractError("camera path enters the scene geometry")
    frames, depth, pmaps, valid = [], [], [], []
    for t, g in enumerate(poses):
        img, d, pm, ok = render(points, colors, g, spec.image_hw)
        frames.append(ImageFrame(img, t / spec.fps, t))
        depth.append(d)
        pmaps.append(pm)
        valid.append(ok)
    return SequenceSource("synthetic", frames, poses, np.array(depth), np.array(pmaps), np.array(valid))


# ---------------------------------------------------------------------------
# TUM RGB-D
# ---------------------------------------------------------------------------

# freiburg1 intrinsics at 640x480
TUM_INTRINSICS = (517.3, 516.5, 318.6, 255.3)
TUM_SIZE = (480, 640)
TUM_DEPTH_SCALE = 5000.0


def read_tum_list(path) -> list:
    """Rows of a TUM text list (``#`` comments and blank lines skipped)."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    return [line.split() for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]


def associate(ts_a, ts_b, window: float = 0.02):
    """Greedy one-to-one nearest-timestamp matching within ``window`` seconds.

    Returns a list of ``(i, j)`` index pairs sorted by ``i``.
    """
    a = np.asarray(ts_a, dtype=np.float64)
    b = np.asarray(ts_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return []
    diff = np.abs(a[:, None] - b[None, :])
    cand = np.argwhere(diff <= window)
    order = np.argsort(diff[cand[:, 0], cand[:, 1]], kind="stable")
    used_a, used_b, pairs = set(), set(), []
    for i, j in cand[order]:
        if i in used_a or j in used_b:
            continue
        used_a.add(int(i))
        used_b.add(int(j))
        pairs.append((int(i), int(j)))
    return sorted(pairs)


def _load_rgb(path, image_hw):
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((image_hw[1], image_hw[0]), Image.BOX)
            return np.asarray(im, dtype=np.float64) / 255.0
    except OSError as e:
        raise DataIOError(f"cannot read image {path}: {e}") from e


def _load_depth(path, image_hw):
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
    except OSError as e:
        raise DataIOError(f"cannot read depth {path}: {e}") from e
    H, W = image_hw
    rows = (np.arange(H) + 0.5) * arr.shape[0] / H
    cols = (np.arange(W) + 0.5) * arr.shape[1] / W
    return arr[rows.astype(int)[:, None], cols.astype(int)[None, :]] / TUM_DEPTH_SCALE


def _backproject(depth, image_hw, src_size=TUM_SIZE, K=TUM_INTRINSICS):
    H, W = image_hw
    sy, sx = H / src_size[0], W / src_size[1]
    fx, fy, cx, cy = K[0] * sx, K[1] * sy, K[2] * sx, K[3] * sy
    u, v = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    return np.stack([(u - cx) / fx * depth, (v - cy) / fy * depth, depth], -1)


def load_tum_sequence(directory, image_hw=(32, 32), window: float = 0.02) -> SequenceSource:
    """Load a TUM RGB-D directory (``rgb.txt`` + ``groundtruth.txt``, optional ``depth.txt``).

    Frames without a ground-truth pose inside ``window`` seconds are dropped
    and counted in :attr:`SequenceSource.dropped`.
    """
    root = Path(directory)
    for name in ("rgb.txt", "groundtruth.txt"):
        if not (root / name).is_file():
            raise DataIOError(f"{root} is missing {name}")
    rgb = read_tum_list(root / "rgb.txt")
    gt = read_tum_list(root / "groundtruth.txt")
    rgb_ts = [float(r[0]) for r in rgb]
    gt_ts = [float(r[0]) for r in gt]
    pairs = associate(rgb_ts, gt_ts, window)
    dropped = len(rgb) - len(pairs)
    if dropped:
        log.warning("%d of %d frames had no ground-truth pose within %.0f ms and were dropped",
                    dropped, len(rgb), window * 1e3)
    depth_pairs = {}
    if (root / "depth.txt").is_file():
        dl = read_tum_list(root / "depth.txt")
        for i, j in associate(rgb_ts, [float(r[0]) for r in dl], window):
            depth_pairs[i] = root / dl[j][1]
    frames, poses, depth = [], [], []
    for k, (i, j) in enumerate(pairs):
        frames.append(ImageFrame(_load_rgb(root / rgb[i][1], image_hw), rgb_ts[i], k))
        v = [float(x) for x in gt[j][1:8]]
        poses.append(SE3Pose(v[3:7], v[0:3]))
        if i in depth_pairs:
            depth.append(_load_depth(depth_pairs[i], image_hw))
    have_depth = bool(frames) and len(depth) == len(frames)
    d = np.array(depth) if have_depth else None
    pm = np.array([_backproject(x, image_hw) for x in depth]) if have_depth else None
    return SequenceSource("tum_rgbd", frames, poses, d, pm, None if d is None else d > 0, dropped)
