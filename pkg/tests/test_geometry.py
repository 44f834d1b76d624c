import numpy as np
import pytest

import oracles
from slamformer import tensor as T
from slamformer.errors import EstimationError, RankError
from slamformer.geometry import (
    MIN_SCALE, SE3Pose, Sim3Transform, apply_to_pointmap, huber_norm, matrix_to_quat, quat_from_axis_angle,
    quat_mul, quat_to_matrix, random_quat, relative_pose, relative_pose_t, scale_objective, solve_scale,
    spatial_gradient, spatial_gradient_t, transform_points_t, umeyama_sim3,
)
from slamformer.tensor import Tensor

rng = np.random.default_rng(0)


def test_quaternion_matrix_agrees_with_oracle():
    for _ in range(20):
        q = random_quat(rng)
        assert np.allclose(quat_to_matrix(q), oracles.quat_matrix(q), atol=1e-12)
        q2 = matrix_to_quat(quat_to_matrix(q))
        assert np.allclose(q2, q if q[3] >= 0 else -q, atol=1e-12)


def test_quat_mul_is_matrix_product():
    a, b = random_quat(rng), random_quat(rng)
    assert np.allclose(quat_to_matrix(quat_mul(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)


def test_se3_group_laws():
    g = SE3Pose(random_quat(rng), rng.normal(size=3))
    h = SE3Pose(random_quat(rng), rng.normal(size=3))
    assert np.allclose((g @ h).matrix(), g.matrix() @ h.matrix(), atol=1e-12)
    assert np.allclose((g @ g.inverse()).matrix(), np.eye(4), atol=1e-12)
    assert np.allclose(relative_pose(g, h).matrix(), np.linalg.inv(g.matrix()) @ h.matrix(), atol=1e-12)
    pts = rng.normal(size=(5, 3))
    assert np.allclose(g.apply(pts), pts @ g.matrix()[:3, :3].T + g.translation)
    P = rng.normal(size=(2, 3, 3))
    assert np.allclose(apply_to_pointmap(g, P).reshape(-1, 3), g.apply(P.reshape(-1, 3)))


def test_tensor_pose_helpers_match_numpy():
    a = SE3Pose(random_quat(rng), rng.normal(size=3))
    b = SE3Pose(random_quat(rng), rng.normal(size=3))
    with T.precision(np.float64):
        q, t = relative_pose_t(Tensor(a.rotation), Tensor(a.translation), Tensor(b.rotation), Tensor(b.translation))
        r = relative_pose(a, b)
        assert np.allclose(quat_to_matrix(q.data), quat_to_matrix(r.rotation), atol=1e-12)
        assert np.allclose(t.data, r.translation, atol=1e-12)
        pts = rng.normal(size=(4, 3))
        assert np.allclose(transform_points_t(Tensor(a.rotation), Tensor(a.translation), Tensor(pts)).data,
                           a.apply(pts), atol=1e-12)


def test_spatial_gradient_forward_differences():
    m = np.arange(12.0).reshape(3, 4) ** 2
    dx, dy = spatial_gradient(m)
    assert dx[1, 2] == m[1, 3] - m[1, 2] and np.all(dx[:, -1] == 0)
    assert dy[1, 2] == m[2, 2] - m[1, 2] and np.all(dy[-1] == 0)
    tx, ty = spatial_gradient_t(Tensor(m, dtype=np.float64))
    assert np.array_equal(tx.data, dx) and np.array_equal(ty.data, dy)


def test_huber_norm_branches():
    assert huber_norm([0.05], 0.1) == pytest.approx(0.5 * 0.05 ** 2)
    assert huber_norm([-1.0], 0.1) == pytest.approx(0.1 * (1.0 - 0.05))


def test_scale_solver_properties():
    P = rng.normal(size=(30, 3))
    P[:, 2] = rng.uniform(1, 3, 30)
    est = solve_scale(P / 1.7, P, P[:, 2])
    assert est.scale == pytest.approx(1.7, rel=1e-12) and est.residual == pytest.approx(0, abs=1e-9)
    # the solver's objective value is no worse than any probe
    noisy = P / 1.7 + rng.normal(scale=0.05, size=P.shape)
    s = solve_scale(noisy, P, P[:, 2]).scale
    for probe in np.linspace(0.5 * s, 1.5 * s, 41):
        assert scale_objective(s, noisy, P, P[:, 2]) <= scale_objective(probe, noisy, P, P[:, 2]) + 1e-9
    # negative ratios clamp at the floor
    assert solve_scale(-P, P, P[:, 2]).scale == MIN_SCALE
    with pytest.raises(EstimationError):
        solve_scale(P, P, np.zeros(30))


def test_umeyama_se3_mode_and_rank():
    x = rng.normal(size=(20, 3))
    R = quat_to_matrix(quat_from_axis_angle([1, 2, 3], 0.7))
    y = x @ R.T + [1, 2, 3]
    a = umeyama_sim3(x, y, with_scale=False)
    assert a.scale == 1.0 and np.allclose(a.rotation_matrix(), R, atol=1e-12)
    with pytest.raises(RankError):
        umeyama_sim3(x[:2], y[:2])
    line = np.outer(np.arange(10.0), [1, 2, 3])
    with pytest.raises(RankError):
        umeyama_sim3(line, line)


def test_sim3_apply():
    s = Sim3Transform(2.0, quat_from_axis_angle([0, 0, 1], np.pi / 2), np.array([1.0, 0, 0]))
    assert np.allclose(s.apply([[1.0, 0, 0]]), [[1.0, 2.0, 0]])
