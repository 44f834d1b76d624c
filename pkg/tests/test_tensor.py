import numpy as np
import pytest

from slamformer import tensor as T
from slamformer.errors import ConfigError, ContractError, DimensionError, EvaluationError, NumericError
from slamformer.tensor import GradTape, Tensor


def grad_of(f, *arrays):
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with GradTape() as tape:
        out = f(*leaves)
    g = T.backward(out, tape)
    return [g[x] if x in g else np.zeros(x.shape) for x in leaves]


def check(f, *arrays, tol=1e-6):
    with T.precision(np.float64):
        an = grad_of(f, *arrays)
        for i, a in enumerate(arrays):
            num = T.finite_diff_gradient(
                lambda x: f(*[x if j == i else Tensor(b, dtype=np.float64) for j, b in enumerate(arrays)]),
                a, step=1e-6)
            assert np.max(np.abs(an[i] - num)) <= tol * max(1.0, np.max(np.abs(num)))


rng = np.random.default_rng(0)
A = rng.normal(size=(3, 4))
B = rng.normal(size=(3, 4))
POS = rng.uniform(0.5, 2.0, size=(3, 4))


@pytest.mark.parametrize("f,args", [
    (lambda a, b: T.sum_(T.add(a, b)), (A, B)),
    (lambda a, b: T.sum_(T.mul(T.sub(a, b), a)), (A, B)),
    (lambda a, b: T.sum_(T.div(a, b)), (A, POS)),
    (lambda a: T.sum_(T.exp(a)), (A,)),
    (lambda a: T.sum_(T.log(a)), (POS,)),
    (lambda a: T.sum_(T.abs_(a)), (A,)),
    (lambda a: T.sum_(T.sqrt(a)), (POS,)),
    (lambda a: T.sum_(T.tanh(a)), (A,)),
    (lambda a: T.sum_(T.gelu(a)), (A,)),
    (lambda a: T.sum_(T.huber(a, 0.3)), (A,)),
    (lambda a: T.sum_(T.norm(a, axis=-1)), (A,)),
    (lambda a: T.sum_(T.mul(T.transpose(a), T.transpose(a))), (A,)),
    (lambda a: T.sum_(T.square(T.reshape(a, (4, 3)))), (A,)),
    (lambda a: T.sum_(T.square(a[1:, ::2])), (A,)),
    (lambda a: T.sum_(T.square(a[..., 2])), (A,)),
    (lambda a, b: T.sum_(T.square(T.concat([a, b], axis=1))), (A, B)),
    (lambda a, b: T.sum_(T.square(T.stack([a, b], axis=0))), (A, B)),
    (lambda a: T.sum_(T.square(T.mean(a, axis=0))), (A,)),
    (lambda a, b: T.sum_(T.square(T.matmul(a, T.transpose(b)))), (A, B)),
    (lambda a: T.sum_(T.square(T.softmax_rows(a))), (A,)),
    (lambda a: T.sum_(T.square(T.expand(a[0:1], (3, 4)))), (A,)),
])
def test_op_gradients(f, args):
    check(f, *args)


def test_masked_softmax_zero_and_gradient():
    mask = np.array([[1, 0, 1, 0], [1, 1, 1, 1], [0, 0, 1, 0]], dtype=bool)
    out = T.softmax_rows(Tensor(A), mask).data
    assert np.all(out[~mask] == 0)
    assert np.allclose(out.sum(-1), 1)
    check(lambda a: T.sum_(T.square(T.softmax_rows(a, mask))), A)


def test_fully_masked_row_rejected():
    with pytest.raises(ContractError):
        T.softmax_rows(Tensor(A), np.zeros((3, 4), dtype=bool))


def test_layer_norm_gradient():
    g = rng.normal(size=4)
    b = rng.normal(size=4)
    check(lambda x, gg, bb: T.sum_(T.mul(T.layer_norm(x, gg, bb), Tensor(B, dtype=np.float64))), A, g, b)


def test_quat_to_rotvec_gradient_and_small_angle():
    q = np.array([[0.1, -0.2, 0.3, 0.9], [1e-6, 2e-6, -1e-6, 1.0], [0.2, 0.1, 0.0, -0.95]])
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    check(lambda x: T.sum_(T.mul(T.quat_to_rotvec(x), Tensor(np.arange(9.0).reshape(3, 3), dtype=np.float64))), q)
    # 90 degrees about z
    r = T.quat_to_rotvec(Tensor([0, 0, np.sqrt(0.5), np.sqrt(0.5)], dtype=np.float64)).data
    assert np.allclose(r, [0, 0, np.pi / 2])


def test_norm_zero_subgradient():
    with T.precision(np.float64):
        (g,) = grad_of(lambda a: T.sum_(T.norm(a, axis=-1)), np.zeros((2, 3)))
    assert np.array_equal(g, np.zeros((2, 3)))


def test_shape_rules():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((3, 4))), Tensor(np.ones((4,))))
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4, 2))))
    s = T.add(Tensor(np.ones((3, 4))), Tensor(2.0))
    assert s.shape == (3, 4)


def test_nonfinite_rejected():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        T.log(Tensor([0.0, 1.0]))


def test_huber_requires_positive_eps():
    with pytest.raises(ConfigError):
        T.huber(Tensor([1.0]), 0.0)


def test_dtype_default_and_precision_context():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert T.get_dtype() == np.float32
    # numpy float64 scalars do not promote float32 tensors
    assert T.mul(Tensor([1.0, 2.0]), np.float64(0.5)).dtype == np.float32


def test_tensor_data_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5


def test_gradient_accumulates_over_reuse():
    with T.precision(np.float64):
        (g,) = grad_of(lambda a: T.sum_(T.add(T.mul(a, a), a)), A)
    assert np.allclose(g, 2 * A + 1)


def test_untracked_ops_outside_tape():
    a = Tensor(A, requires_grad=True)
    with GradTape() as tape:
        pass
    b = T.mul(a, 2.0)
    assert not tape.nodes
    assert b.shape == a.shape


def test_finite_diff_rejects_nonfinite_objective():
    def f(x):
        v = x.data.sum()
        return float("inf") if v > 0 else v
    with pytest.raises(EvaluationError):
        T.finite_diff_gradient(f, np.array([0.0]), step=1e-3)


def test_matmul_matches_triple_loop():
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))
    with T.precision(np.float64):
        got = T.matmul(Tensor(a), Tensor(b)).numpy()
    loop = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(5):
                loop[i, j] += a[i, k] * b[k, j]
    assert np.allclose(got, loop, rtol=0, atol=1e-12)


def test_multiply_by_ones_is_identity():
    x = Tensor(A, dtype=np.float64)
    assert np.array_equal(T.mul(x, Tensor(np.ones_like(A), dtype=np.float64)).numpy(), A)


def test_softmax_uniform_and_single_allowed():
    s = T.softmax_rows(Tensor(np.full((2, 4), 3.0))).numpy()
    assert np.allclose(s, 0.25)
    mask = np.array([[False, True, False, False]])
    s = T.softmax_rows(Tensor(rng.normal(size=(1, 4))), mask).numpy()
    assert np.array_equal(s, [[0, 1, 0, 0]])


def test_layer_norm_of_constant_vector_is_bias():
    x = Tensor(np.full((2, 6), 7.5))
    out = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).numpy()
    assert np.allclose(out, 0.0)


def test_backward_of_sum_and_half_square():
    x = rng.normal(size=(4, 3))
    assert np.array_equal(grad_of(T.sum_, x)[0], np.ones_like(x))
    g = grad_of(lambda t: T.sum_(T.scale(T.square(t), 0.5)), x)[0]
    assert np.allclose(g, x, rtol=0, atol=1e-15)


def test_composite_against_coarse_differences():
    def f(a):
        h = T.tanh(T.matmul(a, Tensor(B.T, dtype=np.float64)))
        return T.sum_(T.huber(T.sub(T.softmax_rows(h), 0.2), 0.05))

    with T.precision(np.float64):
        an = grad_of(f, A)[0]
        num = T.finite_diff_gradient(f, A, step=1e-3)
    assert np.max(np.abs(an - num)) <= 1e-4 * max(1.0, np.max(np.abs(num)))


def test_huber_gradient_away_from_kink():
    x = np.array([-2.0, -0.4, -0.05, 0.03, 0.3, 1.7])
    check(lambda t: T.sum_(T.huber(t, 0.1)), x)
    g = grad_of(lambda t: T.sum_(T.huber(t, 0.1)), x)[0]
    assert np.allclose(g, np.clip(x, -0.1, 0.1))
