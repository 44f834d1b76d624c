"""Independent reference implementations used as test oracles.

Everything here is written with plain loops, rotation matrices and the
standard library so it shares no code paths with the package.
"""
import math
import struct

import numpy as np


# masks ----------------------------------------------------------------------

def mask_rule(kind, n, prefix=None):
    allow = [[False] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if kind == "full":
                ok = True
            elif kind == "causal_full2":
                ok = j <= i or (i in (0, 1) and j in (0, 1))
            else:
                ok = j <= i or (i < prefix and j < prefix)
            allow[i][j] = ok
    return np.array(allow, dtype=bool)


# rotations --------------------------------------------------------------------

def quat_matrix(q):
    x, y, z, w = (float(v) for v in q)
    n = math.sqrt(x * x + y * y + z * z + w * w)
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_log(R):
    c = (R[0][0] + R[1][1] + R[2][2] - 1.0) / 2.0
    c = max(-1.0, min(1.0, c))
    theta = math.acos(c)
    vee = [R[2][1] - R[1][2], R[0][2] - R[2][0], R[1][0] - R[0][1]]
    if theta < 1e-8:
        return [v / 2.0 for v in vee]
    k = theta / (2.0 * math.sin(theta))
    return [v * k for v in vee]


def rel(Ra, ta, Rb, tb):
    Rt = Ra.T
    return Rt @ Rb, Rt @ (np.asarray(tb) - np.asarray(ta))


def huber_scalar(r, eps):
    a = abs(r)
    return 0.5 * a * a if a <= eps else eps * (a - 0.5 * eps)


# losses -------------------------------------------------------------------------

def _frame_sum(vals, gvals, conf, valid, alpha, dist):
    H, W = len(valid), len(valid[0])
    total = 0.0
    for y in range(H):
        for x in range(W):
            if not valid[y][x]:
                continue
            c = conf[y][x]
            total += c * dist(vals[y][x], gvals[y][x])
            total -= alpha * math.log(c)
            if x + 1 < W and valid[y][x + 1]:
                total += c * dist(_diff(vals[y][x + 1], vals[y][x]), _diff(gvals[y][x + 1], gvals[y][x]))
            if y + 1 < H and valid[y + 1][x]:
                total += c * dist(_diff(vals[y + 1][x], vals[y][x]), _diff(gvals[y + 1][x], gvals[y][x]))
    return total


def _diff(a, b):
    if isinstance(a, (list, tuple)):
        return [u - v for u, v in zip(a, b)]
    return a - b


def _l1(a, b):
    return abs(a - b)


def _l2(a, b):
    return math.sqrt(sum((u - v) ** 2 for u, v in zip(a, b)))


def depth_loss_loop(pointmaps, confs, gt_depth, valid, s, alpha):
    frames = []
    for t in range(len(pointmaps)):
        if not np.any(valid[t]):
            continue
        H, W = gt_depth[t].shape
        d = [[s * float(pointmaps[t][y][x][2]) for x in range(W)] for y in range(H)]
        D = [[float(gt_depth[t][y][x]) for x in range(W)] for y in range(H)]
        frames.append(_frame_sum(d, D, confs[t].tolist(), valid[t].tolist(), alpha, _l1))
    return sum(frames) / len(frames)


def pointmap_loss_loop(pointmaps, confs, quats, trans, gt_first, valid, s, alpha):
    R1, t1 = quat_matrix(quats[0]), np.asarray(trans[0], dtype=float)
    frames = []
    for t in range(len(pointmaps)):
        if not np.any(valid[t]):
            continue
        Rt, tt = quat_matrix(quats[t]), np.asarray(trans[t], dtype=float)
        H, W = valid[t].shape
        pts = [[list(s * (R1.T @ (Rt @ np.asarray(pointmaps[t][y][x], float) + tt - t1))) for x in range(W)]
               for y in range(H)]
        gt = [[list(map(float, gt_first[t][y][x])) for x in range(W)] for y in range(H)]
        frames.append(_frame_sum(pts, gt, confs[t].tolist(), valid[t].tolist(), alpha, _l2))
    return sum(frames) / len(frames)


def camera_loss_loop(quats, trans, gt_quats, gt_trans, s, eps):
    n = len(quats)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            Rp, tp = rel(quat_matrix(quats[i]), trans[i], quat_matrix(quats[j]), trans[j])
            Rg, tg = rel(quat_matrix(gt_quats[i]), gt_trans[i], quat_matrix(gt_quats[j]), gt_trans[j])
            r = matrix_log(Rg.T @ Rp) + [s * a - b for a, b in zip(tp, tg)]
            total += sum(huber_scalar(v, eps) for v in r)
    return total


# scale ---------------------------------------------------------------------------

def scale_cost(s, P_pred, P, D):
    total = 0.0
    for a, b, d in zip(P_pred.reshape(-1, 3), P.reshape(-1, 3), D.reshape(-1)):
        for k in range(3):
            total += abs(s * a[k] - b[k]) / d
    return total


def golden_section_scale(P_pred, P, D, lo, hi, grid=400, iters=200):
    """Grid bracket then golden-section refinement of the convex L1 scale cost."""
    xs = np.linspace(lo, hi, grid)
    a = P_pred.reshape(-1)
    b = P.reshape(-1)
    d = np.repeat(D.reshape(-1), 3)
    cost = lambda s: float(np.sum(np.abs(s * a - b) / d))
    vals = [cost(x) for x in xs]
    k = int(np.argmin(vals))
    left, right = xs[max(k - 1, 0)], xs[min(k + 1, grid - 1)]
    g = (math.sqrt(5) - 1) / 2
    c, e = right - g * (right - left), left + g * (right - left)
    for _ in range(iters):
        if cost(c) < cost(e):
            right = e
        else:
            left = c
        c, e = right - g * (right - left), left + g * (right - left)
    return (left + right) / 2


# PLY -------------------------------------------------------------------------------

def minimal_ply_reader(blob: bytes):
    """Parse a binary little-endian PLY of float xyz + uchar rgb vertices."""
    head, _, body = blob.partition(b"end_header\n")
    lines = head.decode("ascii").strip().split("\n")
    assert lines[0] == "ply"
    assert lines[1] == "format binary_little_endian 1.0"
    count = None
    props = []
    for ln in lines[2:]:
        parts = ln.split()
        if parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        if parts[0] == "property":
            props.append((parts[1], parts[2]))
    assert props == [("float", "x"), ("float", "y"), ("float", "z"),
                     ("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]
    rec = struct.Struct("<fffBBB")
    assert len(body) == rec.size * count
    rows = [rec.unpack_from(body, i * rec.size) for i in range(count)]
    return count, rows
