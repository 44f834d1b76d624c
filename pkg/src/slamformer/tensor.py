"""Small dense tensor library with a reverse-mode gradient tape.

Tensors wrap read-only numpy arrays.  Operations are recorded on the active
:class:`GradTape` only when one of their inputs is tracked (a leaf created with
``requires_grad=True`` or the output of an op recorded on the same tape), so
inference code pays almost nothing for the autodiff machinery.

Broadcasting is deliberately limited to scalars and exact shape matches.  The
model needs row broadcasting for biases; that goes through :func:`expand`, whose
backward sums over the repeated axes.
"""
from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EvaluationError, NumericError

_DTYPE = np.float64 if os.environ.get("SLAMFORMER_FLOAT64", "") == "1" else np.float32


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise DimensionError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``"float32"`` or ``"float64"``)."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = _frozen(arr)
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _frozen(arr)
        t.requires_grad = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(self, o)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return add(neg(self), o)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(self, o)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_TAPES: list["GradTape"] = []


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Gradients:
    """Mapping from leaf tensors to gradient arrays (keyed by identity)."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._grads[id(t)]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def get(self, t: Tensor, default=None):
        return self._grads.get(id(t), default)

    def __len__(self):
        return len(self._grads)

    def items(self):
        for k, g in self._grads.items():
            yield self._leaves[k], g


class GradTape:
    """Records differentiable ops in execution (hence topological) order.

    Use as a context manager; nested tapes are allowed but only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watches(self, t) -> bool:
        if not isinstance(t, Tensor):
            return False
        if t.requires_grad:
            self._leaves.setdefault(id(t), t)
            return True
        return id(t) in self._tracked

    def record(self, out: Tensor, inputs: Sequence, backward: Callable) -> None:
        self.nodes.append(_Node(out, tuple(inputs), backward))
        self._tracked.add(id(out))

    def reset(self) -> None:
        self.nodes.clear()
        self._tracked.clear()
        self._leaves.clear()

    def gradient(self, loss: Tensor) -> Gradients:
        return backward(loss, self)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _finish(out_arr: np.ndarray, inputs: Sequence, backward: Callable, name: str) -> Tensor:
    out_arr = np.asarray(out_arr)
    if out_arr.base is not None or not out_arr.flags.writeable:
        out_arr = out_arr.copy()
    if not np.all(np.isfinite(out_arr)):
        raise NumericError(f"{name} produced non-finite values")
    out = Tensor._wrap(out_arr)
    tape = _active_tape()
    if tape is not None and any([tape.watches(x) for x in inputs]):
        tape.record(out, inputs, backward)
    return out


def backward(loss: Tensor, tape: GradTape) -> Gradients:
    """Reverse pass over ``tape``; returns gradients of every tracked leaf.

    The tape is reset afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not (loss.requires_grad or id(loss) in tape._tracked):
        raise ContractError("loss is not on the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not isinstance(x, Tensor):
                continue
            if not (x.requires_grad or id(x) in tape._tracked):
                continue
            k = id(x)
            if k in grads:
                grads[k] = grads[k] + gx
            else:
                grads[k] = gx
    result = Gradients()
    for k, leaf in tape._leaves.items():
        if k in grads:
            result._grads[k] = grads[k]
            result._leaves[k] = leaf
    tape.reset()
    return result


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) or (
        isinstance(x, Tensor) and x.ndim == 0)


def _operands(a, b, name):
    if not isinstance(a, Tensor):
        raise DimensionError(f"{name}: first operand must be a Tensor")
    if isinstance(b, Tensor):
        if b.shape != a.shape and b.ndim != 0 and a.ndim != 0:
            raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} are incompatible")
        return a.data, b.data
    if _is_scalar(b):
        # python and numpy scalars take the tensor's dtype (no silent upcast)
        return a.data, a.data.dtype.type(b)
    raise DimensionError(f"{name}: unsupported operand {type(b).__name__}")


def _unbroadcast(g, target):
    if not isinstance(target, Tensor):
        return None
    if target.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    x, y = _operands(a, b, "add")
    return _finish(x + y, (a, b),
                   lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Tensor:
    x, y = _operands(a, b, "sub")
    return _finish(x - y, (a, b),
                   lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    x, y = _operands(a, b, "mul")
    return _finish(x * y, (a, b),
                   lambda g: (_unbroadcast(g * y, a), _unbroadcast(g * x, b)), "mul")


def div(a, b) -> Tensor:
    x, y = _operands(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x / y
    return _finish(out, (a, b),
                   lambda g: (_unbroadcast(g / y, a), _unbroadcast(-g * x / (y * y), b)), "div")


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, float(s))


def neg(a: Tensor) -> Tensor:
    return _finish(-a.data, (a,), lambda g: (-g,), "neg")


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` or ``scale``."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        if not _is_scalar(b):
            raise DimensionError("scale expects a scalar")
        return mul(a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _finish(out, (a,), lambda g: (g / x,), "log")


def abs_(a: Tensor) -> Tensor:
    x = a.data
    return _finish(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _finish(x * x, (a,), lambda g: (2 * g * x,), "square")


def sqrt(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = np.where(out > 0, g / (2 * np.where(out > 0, out, 1)), 0)
        return (gx.astype(x.dtype),)
    return _finish(out, (a,), bw, "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _finish(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)
    return _finish(out.astype(x.dtype), (a,), bw, "gelu")


def huber(a: Tensor, epsilon: float) -> Tensor:
    """Elementwise Huber: r^2/2 for |r| <= eps, eps*(|r| - eps/2) beyond."""
    if not epsilon > 0:
        from .errors import ConfigError
        raise ConfigError("huber epsilon must be positive")
    x = a.data
    ax = np.abs(x)
    quad = ax <= epsilon
    out = np.where(quad, 0.5 * x * x, epsilon * (ax - 0.5 * epsilon)).astype(x.dtype)
    return _finish(out, (a,),
                   lambda g: ((g * np.where(quad, x, epsilon * np.sign(x))).astype(x.dtype),),
                   "huber")


def norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm over ``axis``; the subgradient at zero is taken as 0."""
    x = a.data
    out = np.sqrt((x * x).sum(axis=axis))

    def bw(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1)
        return ((np.expand_dims(g, axis) * np.where(n > 0, x / safe, 0)).astype(x.dtype),)
    return _finish(out, (a,), bw, "norm")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    src = a.shape
    return _finish(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx])

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return _finish(out, (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _finish(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    n = len(tensors)
    return _finish(out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape`` (numpy rules, leading axes allowed)."""
    shape = tuple(shape)
    try:
        out = np.array(np.broadcast_to(a.data, shape))
    except ValueError as e:
        raise DimensionError(str(e)) from None
    src = a.shape

    def bw(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)
    return _finish(out, (a,), bw, "expand")


def sum_(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)
    src = a.shape

    def bw(g):
        if axis is None:
            return (np.full(src, g, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).astype(a.dtype),)
    return _finish(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dims, if any, must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    x, y = a.data, b.data
    out = x @ y
    return _finish(out, (a, b),
                   lambda g: (g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g),
                   "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = add(y, expand(b, y.shape))
    return y


_MASK_FILL = -1e9


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax along the last axis.

    ``mask`` is a boolean array matching the trailing two dims of ``x`` (it is
    shared across any leading dims).  Masked logits get an additive large
    negative value before max-subtraction and are set to exactly zero after.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape[-mask.ndim:]:
            raise DimensionError(f"mask {mask.shape} does not fit logits {z.shape}")
        if not mask.any(axis=-1).all():
            raise ContractError("softmax row with every entry masked")
        z = np.where(mask, z, z + _MASK_FILL)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _finish(out, (x,), bw, "softmax_rows")


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm gain/bias must have shape (d,)")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx.astype(v.dtype), gg.astype(v.dtype), gb.astype(v.dtype)
    return _finish(out.astype(v.dtype), (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------------------
# quaternion log (rotation vector), used by the camera loss
# ---------------------------------------------------------------------------


def quat_to_rotvec(q: Tensor) -> Tensor:
    """Rotation vector (axis * angle) of unit quaternions ``(..., 4)`` stored xyzw.

    The sign is chosen so the scalar part is non-negative (shortest rotation).
    """
    if q.shape[-1] != 4:
        raise DimensionError("quaternions must have a trailing dim of 4")
    qd = q.data.astype(np.float64)
    sgn = np.where(qd[..., 3:4] < 0, -1.0, 1.0)
    qd = qd * sgn
    v, w = qd[..., :3], qd[..., 3]
    n = np.sqrt((v * v).sum(axis=-1))
    small = n < 1e-4
    n_safe = np.where(small, 1.0, n)
    theta = 2 * np.arctan2(n, w)
    f = np.where(small, 2 / w - (2.0 / 3.0) * n * n / w ** 3, theta / n_safe)
    out = (v * f[..., None]).astype(q.dtype)

    def bw(g):
        g = g.astype(np.float64)
        r2 = n * n + w * w
        dth_dn = 2 * w / r2
        dth_dw = -2 * n / r2
        df_dn = np.where(small, -(4.0 / 3.0) * n / w ** 3, (dth_dn * n - theta) / n_safe ** 2)
        df_dw = np.where(small, -2 / w ** 2 + 2 * n * n / w ** 4, dth_dw / n_safe)
        gv_dot = (g * v).sum(axis=-1)
        unit = np.where(small[..., None], 0.0, v / n_safe[..., None])
        gvec = g * f[..., None] + (gv_dot * df_dn)[..., None] * unit
        gw = gv_dot * df_dw
        gq = np.concatenate([gvec, gw[..., None]], axis=-1) * sgn
        return (gq.astype(q.dtype),)
    return _finish(out, (q,), bw, "quat_to_rotvec")


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_gradient(f: Callable, x, step: float = 1e-3, coords: Iterable[int] | None = None):
    """Central differences of scalar ``f`` at ``x``.

    ``f`` receives a float64 :class:`Tensor` shaped like ``x``.  When ``coords``
    is given only those flat coordinates are evaluated (others are left 0).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords

    def ev(arr):
        val = f(Tensor(arr.reshape(base.shape), dtype=np.float64))
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(val):
            raise EvaluationError("objective is not finite near the evaluation point")
        return val

    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = ev(flat.copy())
        flat[i] = old - step
        fm = ev(flat.copy())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return grad
