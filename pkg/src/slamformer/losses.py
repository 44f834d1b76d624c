"""Confidence-weighted depth / pointmap losses, relative-pose camera loss and
the per-mode and joint objectives."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .geometry import (SE3Pose, quat_mul_t, relative_pose, relative_pose_t, spatial_gradient,
                       spatial_gradient_t, transform_points_t)
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 100.0
    beta: float = 10.0
    alpha: float = 0.2
    epsilon: float = 0.1

    def __post_init__(self):
        for k in ("lam", "beta", "alpha"):
            if not getattr(self, k) >= 0:
                raise ConfigError(f"loss weight {k} must be non-negative")
        if not self.epsilon > 0:
            raise ConfigError("huber epsilon must be positive")


@dataclass
class TensorPrediction:
    """Differentiable head outputs for one frame."""
    pointmap: Tensor     # (H, W, 3), camera-local
    confidence: Tensor   # (H, W), > 1
    rotation: Tensor     # (4,) xyzw, unit
    translation: Tensor  # (3,)

    @property
    def depth(self) -> Tensor:
        return self.pointmap[..., 2]


@dataclass
class ClipTargets:
    """Ground truth for a clip of ``n`` frames."""
    depth: np.ndarray                 # (n, H, W)
    pointmaps: np.ndarray             # (n, H, W, 3), camera-local
    poses: list                       # n SE3Pose, camera-to-world
    valid: np.ndarray | None = None   # (n, H, W) bool

    def __post_init__(self):
        if self.depth is None or self.pointmaps is None or self.poses is None:
            raise ContractError("training needs ground-truth depth, pointmaps and poses")
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.pointmaps = np.asarray(self.pointmaps, dtype=np.float64)
        if self.valid is None:
            self.valid = self.depth > 0
        self.valid = np.asarray(self.valid, dtype=bool) & (self.depth > 0)
        if not (len(self.depth) == len(self.pointmaps) == len(self.poses)):
            raise ContractError("targets disagree on the number of frames")

    def __len__(self):
        return len(self.poses)

    def pointmaps_in_first_frame(self) -> np.ndarray:
        """Ground-truth pointmaps expressed in the first camera's coordinates."""
        g1_inv = self.poses[0].inverse()
        out = np.empty_like(self.pointmaps)
        for t, g in enumerate(self.poses):
            out[t] = g1_inv.compose(g).apply(self.pointmaps[t].reshape(-1, 3)).reshape(self.pointmaps[t].shape)
        return out


def _const(a, dtype) -> Tensor:
    return Tensor._wrap(np.asarray(a, dtype=dtype))


def _grad_masks(valid):
    mx = np.zeros_like(valid)
    my = np.zeros_like(valid)
    mx[:, :-1] = valid[:, 1:] & valid[:, :-1]
    my[:-1] = valid[1:] & valid[:-1]
    return mx, my


def _frame_terms(conf, resid, gres_x, gres_y, valid, alpha, dt):
    """sum conf*resid + sum conf*(|grad diffs|) - alpha*sum log conf over valid pixels."""
    m = _const(valid, dt)
    mx, my = (_const(a, dt) for a in _grad_masks(valid))
    data = T.sum_(T.mul(conf, T.mul(resid, m)))
    grad = T.sum_(T.mul(conf, T.add(T.mul(gres_x, mx), T.mul(gres_y, my))))
    reg = T.mul(T.sum_(T.mul(T.log(conf), m)), -alpha)
    return T.add(T.add(data, grad), reg)


def _average(frame_losses, what):
    if not frame_losses:
        raise ContractError(f"{what}: every frame lacks valid ground truth")
    total = frame_losses[0]
    for f in frame_losses[1:]:
        total = T.add(total, f)
    return T.mul(total, 1.0 / len(frame_losses))


def depth_loss(preds: Sequence[TensorPrediction], gt_depth, scale: float, alpha: float, valid=None,
               per_frame: list | None = None) -> Tensor:
    """Confidence-weighted L1 on scaled depth and its spatial gradient, minus
    ``alpha * log(confidence)``; summed over valid pixels, averaged over frames."""
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    if valid is None:
        valid = gt_depth > 0
    if len(preds) != len(gt_depth):
        raise ContractError("prediction and depth counts differ")
    out = []
    for t, p in enumerate(preds):
        v = np.asarray(valid[t], dtype=bool)
        if p.pointmap.shape[:2] != gt_depth[t].shape:
            raise ContractError("depth map shape mismatch")
        if not v.any():
            log.warning("frame %d has no valid depth; excluded from depth loss", t)
            continue
        dt = p.pointmap.dtype
        D = np.where(v, gt_depth[t], 0.0)
        sd = T.mul(p.depth, float(scale))
        resid = T.abs_(T.sub(sd, _const(D, dt)))
        gx, gy = spatial_gradient_t(sd)
        Dx, Dy = spatial_gradient(D)
        f = _frame_terms(p.confidence, resid,
                         T.abs_(T.sub(gx, _const(Dx, dt))), T.abs_(T.sub(gy, _const(Dy, dt))),
                         v, alpha, dt)
        out.append(f)
        if per_frame is not None:
            per_frame.append(f.item())
    return _average(out, "depth_loss")


def aligned_pointmaps_t(preds: Sequence[TensorPrediction]):
    """Predicted local pointmaps moved into frame 1: ``g1^-1 g_t P_t``."""
    if not preds:
        raise ContractError("pointmap loss needs frame 1")
    q1, t1 = preds[0].rotation, preds[0].translation
    out = []
    for p in preds:
        q, t = relative_pose_t(q1, t1, p.rotation, p.translation)
        H, W, _ = p.pointmap.shape
        pts = transform_points_t(q, t, T.reshape(p.pointmap, (H * W, 3)))
        out.append(T.reshape(pts, (H, W, 3)))
    return out


def pointmap_loss(preds: Sequence[TensorPrediction], gt_pointmaps, scale: float, alpha: float, valid=None,
                  per_frame: list | None = None) -> Tensor:
    """Like :func:`depth_loss` but on 3-vectors with a per-pixel Euclidean norm.

    ``gt_pointmaps`` must already be expressed in the first frame's camera
    (see :meth:`ClipTargets.pointmaps_in_first_frame`); predictions are moved
    there through their predicted poses.
    """
    gt = np.asarray(gt_pointmaps, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(gt).all(-1)
    if len(preds) != len(gt):
        raise ContractError("prediction and pointmap counts differ")
    aligned = aligned_pointmaps_t(preds)
    out = []
    for t, (p, Pa) in enumerate(zip(preds, aligned)):
        v = np.asarray(valid[t], dtype=bool)
        if not v.any():
            log.warning("frame %d has no valid points; excluded from pointmap loss", t)
            continue
        dt = Pa.dtype
        G = np.where(v[..., None], gt[t], 0.0)
        sp = T.mul(Pa, float(scale))
        resid = T.norm(T.sub(sp, _const(G, dt)), axis=-1)
        gx, gy = spatial_gradient_t(sp)
        Gx, Gy = spatial_gradient(G)
        f = _frame_terms(p.confidence, resid,
                         T.norm(T.sub(gx, _const(Gx, dt)), axis=-1), T.norm(T.sub(gy, _const(Gy, dt)), axis=-1),
                         v, alpha, dt)
        out.append(f)
        if per_frame is not None:
            per_frame.append(f.item())
    return _average(out, "pointmap_loss")


def camera_loss(preds: Sequence[TensorPrediction], gt_poses: Sequence[SE3Pose], scale: float,
                epsilon: float) -> Tensor:
    """Huber penalty on relative-pose disagreement over all pairs ``i < j``.

    The residual stacks the rotation vector of ``q_gt_rel^-1 * q_pred_rel`` and
    ``scale * t_pred_rel - t_gt_rel``.
    """
    n = len(preds)
    if n < 2 or len(gt_poses) != n:
        raise ContractError("camera loss needs at least two frames with matching ground truth")
    dt = preds[0].rotation.dtype
    total = None
    for i in range(n):
        for j in range(i + 1, n):
            q, t = relative_pose_t(preds[i].rotation, preds[i].translation,
                                   preds[j].rotation, preds[j].translation)
            g = relative_pose(gt_poses[i], gt_poses[j])
            dq = quat_mul_t(_const(np.r_[-g.rotation[:3], g.rotation[3]], dt), q)
            r = T.concat([T.quat_to_rotvec(dq), T.sub(T.mul(t, float(scale)), _const(g.translation, dt))])
            term = T.sum_(T.huber(r, epsilon))
            total = term if total is None else T.add(total, term)
    return total


def mode_loss(preds: Sequence[TensorPrediction], targets: ClipTargets, scale: float, cfg: LossConfig,
              details: dict | None = None) -> Tensor:
    """``L_depth + L_pmap + lambda * L_cam`` for one mode's predictions."""
    pf_d, pf_p = [], []
    ld = depth_loss(preds, targets.depth, scale, cfg.alpha, targets.valid, pf_d)
    lp = pointmap_loss(preds, targets.pointmaps_in_first_frame(), scale, cfg.alpha, targets.valid, pf_p)
    lc = camera_loss(preds, targets.poses, scale, cfg.epsilon)
    if details is not None:
        details.update(depth=ld.item(), pmap=lp.item(), cam=lc.item(), depth_frames=pf_d, pmap_frames=pf_p)
    return T.add(T.add(ld, lp), T.mul(lc, cfg.lam))


def joint_objective(l1: Tensor, l2: Tensor, l3: Tensor, beta: float) -> Tensor:
    return T.add(T.add(l1, l2), T.mul(l3, float(beta)))


@dataclass
class LossReport:
    L_depth: float
    L_pmap: float
    L_cam: float
    L_mode1: float
    L_mode2: float
    L_mode3: float
    L_all: float
    scales: tuple = ()
    per_frame: dict = field(default_factory=dict)

    def to_text(self) -> str:
        """Flat ``key = value`` lines for training logs."""
        lines = [f"{k} = {getattr(self, k):.9g}" for k in
                 ("L_depth", "L_pmap", "L_cam", "L_mode1", "L_mode2", "L_mode3", "L_all")]
        for i, s in enumerate(self.scales, 1):
            lines.append(f"scale_mode{i} = {s:.9g}")
        for key, vals in sorted(self.per_frame.items()):
            for t, v in enumerate(vals):
                lines.append(f"{key}.{t} = {v:.9g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> dict:
        out = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = float(v)
        return out
