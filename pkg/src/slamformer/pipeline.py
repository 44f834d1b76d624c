"""Online execution loop: keyframe detection, frontend tracking, periodic and
final backend refinement, artifact emission."""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .backend import BackendConfig, refine_map, share_cache, should_trigger
from .errors import ConfigError, ContractError, DataIOError
from .evaluation import TimingReport, format_flat, report_dict, timing_summary
from .formats import Trajectory, write_pointcloud, write_trajectory, fuse_pointmaps
from .geometry import SE3Pose
from .frontend import FrontendConfig, TokenMapState, detect_keyframe, initialize_map, track_and_map
from .losses import LossConfig
from .model import ModelConfig, SlamFormer

log = logging.getLogger(__name__)


class Ablation(str, enum.Enum):
    F_ONLY = "f"
    F_EB = "f+eb"
    F_MB = "f+mb"
    F_MB_EB = "f+mb+eb"

    @property
    def run_mid(self) -> bool:
        return "mb" in self.value

    @property
    def run_end(self) -> bool:
        return self.value.endswith("eb")


@dataclass(frozen=True)
class PipelineConfig:
    ablation: Ablation = Ablation.F_MB_EB
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    period: int = 8
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    output_dir: str | None = None
    conf_threshold: float = 1.5

    def __post_init__(self):
        try:
            object.__setattr__(self, "ablation", Ablation(self.ablation))
        except ValueError:
            raise ConfigError(f"unknown ablation {self.ablation!r}") from None

    @property
    def backend(self) -> BackendConfig:
        return BackendConfig(self.period, self.ablation.run_mid, self.ablation.run_end)


@dataclass
class RunArtifacts:
    trajectory: Trajectory
    predictions: list
    keyframes: list
    timing: TimingReport
    backend_calls: dict
    points: np.ndarray | None = None
    colors: np.ndarray | None = None
    loss_log: list | None = None


def full_backend(state: TokenMapState, model):
    return refine_map(state.maps, model)


def identity_backend(state: TokenMapState, model):
    """Hands the frontend's own tokens and cache back unchanged."""
    return list(state.maps), state.cache


def _run_backend(state: TokenMapState, model, backend_fn):
    out = backend_fn(state, model)
    if out is None:
        return state
    refined, cache = out
    return share_cache(state, refined, cache)


def run_sequence(source, cfg: PipelineConfig, model: SlamFormer | None = None,
                 backend_fn: Callable = full_backend, clock: Callable[[], float] = time.perf_counter) -> RunArtifacts:
    """Drive the frontend/backend loop over ``source.frames``.

    ``backend_fn(state, model)`` returns ``(refined_maps, cache)`` or ``None``;
    swapping in :func:`identity_backend` isolates the backend's effect.
    """
    if model is None:
        model = SlamFormer(cfg.model, seed=cfg.seed)
    frames = list(source.frames)
    if cfg.frontend.max_frames is not None:
        frames = frames[:cfg.frontend.max_frames]
    if len(frames) < 2:
        raise ContractError("need at least two frames")
    tau = cfg.frontend.tau
    bcfg = cfg.backend
    durations = {s: [] for s in ("kf_detection", "frontend", "backend")}
    calls = {"mid": 0, "end": 0}

    def timed(stage, fn, *args):
        t0 = clock()
        out = fn(*args)
        durations[stage].append(clock() - t0)
        return out

    wall0 = clock()
    first = frames[0]
    kf_images = {first.frame_index: first}
    state = None
    since_backend = 0
    for frame in frames[1:]:
        prev = first if state is None else state.last_keyframe_image
        is_kf, _ = timed("kf_detection", detect_keyframe, prev, frame, model, tau)
        if not is_kf:
            continue
        kf_images[frame.frame_index] = frame
        if state is None:
            state, _ = timed("frontend", initialize_map, first, frame, model)
            since_backend = 2
        else:
            _, state = timed("frontend", track_and_map, frame, state, model)
            since_backend += 1
        if should_trigger(since_backend, bcfg):
            state = timed("backend", _run_backend, state, model, backend_fn)
            calls["mid"] += 1
            since_backend = 0
    if state is None:
        raise ContractError(f"fewer than two keyframes found; lower tau (currently {tau:g})")
    if bcfg.run_end:
        state = timed("backend", _run_backend, state, model, backend_fn)
        calls["end"] += 1
    wall = clock() - wall0

    preds = [model.decode(m.tokens, m.frame_index) for m in state.maps]
    g1_inv = preds[0].pose.inverse()
    poses = [SE3Pose.identity()] + [g1_inv.compose(p.pose) for p in preds[1:]]
    stamps = [kf_images[i].timestamp for i in state.keyframes]
    traj = Trajectory(np.array(stamps), poses)
    images = [kf_images[i].pixels for i in state.keyframes]
    points, colors = fuse_pointmaps(preds, poses, images, cfg.conf_threshold)
    timing = timing_summary(durations, len(frames), wall)
    art = RunArtifacts(traj, preds, list(state.keyframes), timing, calls, points, colors)
    if cfg.output_dir:
        emit_artifacts(art, cfg.output_dir, images, cfg.conf_threshold)
    return art


def emit_artifacts(art: RunArtifacts, out_dir, images=None, threshold: float = 1.5) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create {out}: {e}") from e
    write_trajectory(art.trajectory, out / "trajectory.txt")
    write_pointcloud(art.predictions, art.trajectory.poses, out / "pointcloud.ply", images, threshold)
    doc = report_dict(timing=art.timing)
    doc["run"] = {"keyframes": len(art.keyframes), "backend_mid": art.backend_calls["mid"],
                  "backend_end": art.backend_calls["end"]}
    try:
        (out / "timing.txt").write_text(format_flat(doc))
    except OSError as e:
        raise DataIOError(f"cannot write timing report: {e}") from e
