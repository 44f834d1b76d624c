"""Trajectory and reconstruction metrics, timing summaries, report output."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import associate
from .errors import ContractError, DataIOError, EvaluationError
from .formats import Trajectory
from .geometry import Sim3Transform, alignment_residuals, umeyama_sim3
from .kernels import nearest_neighbors

STAGES = ("kf_detection", "frontend", "backend")


@dataclass
class TrajectoryEval:
    ate_rmse: float
    alignment: Sim3Transform
    matched_pairs: int


@dataclass
class ReconEval:
    accuracy: float
    completeness: float
    chamfer: float
    samples: int


@dataclass
class TimingReport:
    tpe_ms: dict
    fps: float
    calls: dict = field(default_factory=dict)


def ate_rmse(pred: Trajectory, gt: Trajectory, mode: str = "sim3", window: float = 0.02) -> TrajectoryEval:
    """RMSE of translational error after aligning ``pred`` onto ``gt``.

    ``mode`` is ``"sim3"`` (scale-free, default) or ``"se3"``.
    """
    if mode not in ("sim3", "se3"):
        raise ContractError(f"unknown alignment mode {mode!r}")
    pairs = associate(pred.timestamps, gt.timestamps, window)
    if len(pairs) < 3:
        raise EvaluationError(f"only {len(pairs)} timestamp matches; need at least 3")
    i, j = np.array(pairs).T
    x = pred.positions[i]
    y = gt.positions[j]
    align = umeyama_sim3(x, y, with_scale=(mode == "sim3"))
    err = alignment_residuals(align, x, y)
    return TrajectoryEval(float(np.sqrt(np.mean(err ** 2))), align, len(pairs))


def _subsample(cloud, n, rng):
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) <= n:
        return cloud
    return cloud[np.sort(rng.choice(len(cloud), n, replace=False))]


def recon_metrics(pred_cloud, gt_cloud, samples: int = 20000, seed: int = 0) -> ReconEval:
    """Accuracy (pred to gt), completeness (gt to pred) and their mean.

    Both clouds are subsampled to at most ``samples`` points with a seeded RNG.
    """
    pred_cloud = np.asarray(pred_cloud, dtype=np.float64).reshape(-1, 3)
    gt_cloud = np.asarray(gt_cloud, dtype=np.float64).reshape(-1, 3)
    if len(pred_cloud) == 0 or len(gt_cloud) == 0:
        raise EvaluationError("reconstruction metrics need two non-empty clouds")
    rng = np.random.default_rng(seed)
    p = _subsample(pred_cloud, samples, rng)
    g = _subsample(gt_cloud, samples, rng)
    acc = float(nearest_neighbors(p, g)[0].mean())
    comp = float(nearest_neighbors(g, p)[0].mean())
    return ReconEval(acc, comp, (acc + comp) / 2.0, max(len(p), len(g)))


def timing_summary(durations: dict, frames: int | None = None, wall: float | None = None) -> TimingReport:
    """Mean time per execution (ms) of each stage, plus frames per second.

    ``durations`` maps stage name to a list of seconds.  Without ``wall`` the
    sum of all recorded durations is used as the elapsed time.
    """
    tpe, calls = {}, {}
    for stage, vals in durations.items():
        vals = list(vals)
        calls[stage] = len(vals)
        if vals:
            tpe[stage] = 1e3 * float(np.mean(vals))
    if wall is None:
        wall = float(sum(sum(v) for v in durations.values()))
    fps = (frames / wall) if frames and wall > 0 else 0.0
    return TimingReport(tpe, fps, calls)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _flatten(prefix, obj, out):
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], out)
    elif isinstance(obj, (list, tuple, np.ndarray)):
        for i, v in enumerate(np.asarray(obj).tolist()):
            _flatten(f"{prefix}.{i}", v, out)
    else:
        out.append((prefix, obj))


def report_dict(traj: TrajectoryEval | None = None, recon: ReconEval | None = None,
                timing: TimingReport | None = None) -> dict:
    doc = {}
    if traj is not None:
        a = traj.alignment
        doc["trajectory"] = {"ate_rmse": traj.ate_rmse, "matched_pairs": traj.matched_pairs,
                             "scale": a.scale, "rotation": a.rotation.tolist(),
                             "translation": a.translation.tolist()}
    if recon is not None:
        doc["reconstruction"] = asdict(recon)
    if timing is not None:
        doc["timing"] = {"tpe_ms": dict(timing.tpe_ms), "fps": timing.fps, "calls": dict(timing.calls)}
    return doc


def format_flat(doc: dict) -> str:
    """``key = value`` lines, keys dotted and sorted, floats with 9 significant digits."""
    items = []
    _flatten("", doc, items)
    lines = []
    for k, v in items:
        if isinstance(v, float):
            v = f"{v + 0.0:.9g}"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def format_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_report(doc: dict, flat_path=None, json_path=None) -> None:
    try:
        if flat_path:
            Path(flat_path).write_text(format_flat(doc))
        if json_path:
            Path(json_path).write_text(format_json(doc))
    except OSError as e:
        raise DataIOError(f"cannot write report: {e}") from e
