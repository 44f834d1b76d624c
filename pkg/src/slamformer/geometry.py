"""Poses, pointmap transforms, scale solving and trajectory alignment.

Quaternions are stored ``(x, y, z, w)`` throughout, the same order the TUM
trajectory format uses.  Poses are camera-to-world.

Functions with a ``_t`` suffix operate on :class:`~slamformer.tensor.Tensor`
values and are differentiable; the rest are plain float64 numpy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, EstimationError, RankError
from .kernels import weighted_median
from .tensor import Tensor

# ---------------------------------------------------------------------------
# quaternion algebra (numpy)
# ---------------------------------------------------------------------------


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DimensionError("zero-norm quaternion")
    return q / n


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return np.concatenate([-q[..., :3], q[..., 3:]], axis=-1)


def quat_mul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x1, y1, z1, w1 = np.moveaxis(a, -1, 0)
    x2, y2, z2, w2 = np.moveaxis(b, -1, 0)
    return np.stack([
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    ], axis=-1)


def quat_to_matrix(q):
    x, y, z, w = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion (Shepperd's method), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = quat_normalize(q)
    return -q if q[3] < 0 else q


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([axis * np.sin(angle / 2), [np.cos(angle / 2)]])


def random_quat(rng):
    return quat_normalize(rng.normal(size=4))


# ---------------------------------------------------------------------------
# pose types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SE3Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if n == 0 or not np.all(np.isfinite(q)) or not np.all(np.isfinite(t)):
            raise DimensionError("invalid pose")
        if abs(n - 1.0) > 1e-6:
            q = q / n
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "SE3Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = quat_to_matrix(self.rotation)
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "SE3Pose":
        qi = quat_conj(self.rotation)
        return SE3Pose(qi, -quat_to_matrix(qi) @ self.translation)

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        R = quat_to_matrix(self.rotation)
        return SE3Pose(quat_normalize(quat_mul(self.rotation, other.rotation)),
                       R @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ quat_to_matrix(self.rotation).T + self.translation


@dataclass(frozen=True)
class Sim3Transform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise DimensionError("Sim(3) scale must be positive")
        object.__setattr__(self, "rotation", quat_normalize(np.reshape(self.rotation, 4)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls(1.0, np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation_matrix().T + self.translation


@dataclass(frozen=True)
class ScaleEstimate:
    scale: float
    residual: float


def relative_pose(g_a: SE3Pose, g_b: SE3Pose) -> SE3Pose:
    """``g_a^-1 * g_b``."""
    return g_a.inverse().compose(g_b)


def apply_to_pointmap(g: SE3Pose, P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if not np.all(np.isfinite(P)):
        raise DimensionError("pointmap must be finite")
    return g.apply(P.reshape(-1, 3)).reshape(P.shape)


# ---------------------------------------------------------------------------
# differentiable pose helpers
# ---------------------------------------------------------------------------


def quat_conj_t(q: Tensor) -> Tensor:
    return T.mul(q, Tensor(np.array([-1.0, -1.0, -1.0, 1.0]), dtype=q.dtype))


def quat_mul_t(a: Tensor, b: Tensor) -> Tensor:
    x1, y1, z1, w1 = (a[i] for i in range(4))
    x2, y2, z2, w2 = (b[i] for i in range(4))
    return T.stack([
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    ])


def quat_to_matrix_t(q: Tensor) -> Tensor:
    x, y, z, w = (q[i] for i in range(4))
    one = 1.0
    rows = [
        [one - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), one - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), one - 2 * (x * x + y * y)],
    ]
    return T.stack([T.stack(r) for r in rows])


def _rsub(s: float, t: Tensor) -> Tensor:
    return T.add(T.neg(t), s)


def relative_pose_t(qa: Tensor, ta: Tensor, qb: Tensor, tb: Tensor):
    """Differentiable ``g_a^-1 g_b`` on (quaternion, translation) tensors."""
    qa_inv = quat_conj_t(qa)
    Ra = quat_to_matrix_t(qa)
    q = quat_mul_t(qa_inv, qb)
    t = T.reshape(T.matmul(T.transpose(Ra), T.reshape(T.sub(tb, ta), (3, 1))), (3,))
    return q, t


def transform_points_t(q: Tensor, t: Tensor, pts: Tensor) -> Tensor:
    """Apply the rigid transform (q, t) to ``pts`` of shape ``(n, 3)``."""
    R = quat_to_matrix_t(q)
    return T.add(T.matmul(pts, T.transpose(R)), T.expand(t, pts.shape))


# ---------------------------------------------------------------------------
# maps and norms
# ---------------------------------------------------------------------------


def spatial_gradient(m):
    """Forward differences along x (columns) and y (rows); last column/row is 0."""
    m = np.asarray(m)
    if m.ndim < 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise DimensionError("spatial_gradient needs H, W >= 2")
    dx = np.zeros_like(m)
    dy = np.zeros_like(m)
    dx[:, :-1] = m[:, 1:] - m[:, :-1]
    dy[:-1] = m[1:] - m[:-1]
    return dx, dy


def spatial_gradient_t(m: Tensor):
    if m.ndim < 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise DimensionError("spatial_gradient needs H, W >= 2")
    H, W = m.shape[:2]
    rest = m.shape[2:]
    dx = T.sub(m[:, 1:], m[:, :-1])
    dx = T.concat([dx, Tensor(np.zeros((H, 1) + rest), dtype=m.dtype)], axis=1)
    dy = T.sub(m[1:], m[:-1])
    dy = T.concat([dy, Tensor(np.zeros((1, W) + rest), dtype=m.dtype)], axis=0)
    return dx, dy


def huber_norm(r, epsilon: float) -> float:
    """Sum of per-component Huber penalties."""
    if not epsilon > 0:
        raise ConfigError("huber epsilon must be positive")
    a = np.abs(np.asarray(r, dtype=np.float64))
    return float(np.where(a <= epsilon, 0.5 * a * a, epsilon * (a - 0.5 * epsilon)).sum())


# ---------------------------------------------------------------------------
# scale and alignment
# ---------------------------------------------------------------------------

MIN_SCALE = 1e-6


def scale_objective(s: float, P_pred, P, D, valid=None) -> float:
    P_pred, P, D = (np.asarray(a, dtype=np.float64) for a in (P_pred, P, D))
    r = np.abs(s * P_pred - P) / D[..., None]
    if valid is not None:
        r = r[np.asarray(valid, dtype=bool)]
    return float(r.sum())


def solve_scale(P_pred, P, D, valid=None) -> ScaleEstimate:
    """Minimise ``sum |s * P_pred - P| / D`` over s > 0 (per coordinate, L1).

    Each coordinate contributes ``|P_pred|/D * |s - P/P_pred|``, so the
    minimiser is the weighted median of the ratios.  ``valid`` masks pixels;
    pixels with non-positive depth are dropped.
    """
    P_pred = np.asarray(P_pred, dtype=np.float64).reshape(-1, 3)
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    D = np.asarray(D, dtype=np.float64).reshape(-1)
    ok = np.isfinite(D) & (D > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool).reshape(-1)
    a = P_pred[ok]
    b = P[ok]
    d = D[ok][:, None]
    w = (np.abs(a) / d).reshape(-1)
    use = w > 0
    if not use.any():
        raise EstimationError("no valid elements to estimate scale from")
    ratios = (b.reshape(-1)[use] / a.reshape(-1)[use])
    s = max(weighted_median(ratios, w[use]), MIN_SCALE)
    resid = float((np.abs(s * a - b) / d).sum())
    return ScaleEstimate(float(s), resid)


def umeyama_sim3(traj_pred, traj_gt, with_scale: bool = True) -> Sim3Transform:
    """Least-squares ``y ~ s R x + t`` (Umeyama 1991) for ``(n, 3)`` point sets."""
    x = np.asarray(traj_pred, dtype=np.float64)
    y = np.asarray(traj_gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise DimensionError("trajectories must be matching (n, 3) arrays")
    if x.shape[0] < 3:
        raise RankError("need at least 3 correspondences")
    mx, my = x.mean(0), y.mean(0)
    xc, yc = x - mx, y - my
    sx = np.linalg.svd(xc, compute_uv=False)
    sy = np.linalg.svd(yc, compute_uv=False)
    if sx[0] == 0 or sx[1] <= 1e-12 * sx[0] or sy[0] == 0 or sy[1] <= 1e-12 * sy[0]:
        raise RankError("degenerate (collinear) correspondences")
    n = x.shape[0]
    cov = yc.T @ xc / n
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_x = (xc * xc).sum() / n
    s = float(np.trace(np.diag(d) @ S) / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    return Sim3Transform(s, matrix_to_quat(R), t)


def alignment_residuals(transform: Sim3Transform, traj_pred, traj_gt) -> np.ndarray:
    """Per-point translational error after applying ``transform`` to the prediction."""
    return np.linalg.norm(transform.apply(traj_pred) - np.asarray(traj_gt, dtype=np.float64), axis=1)
