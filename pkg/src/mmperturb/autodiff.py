"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every operation as a node holding its value, the ids
of its parents and a closure mapping the output gradient to parent gradients.
Parent ids are always smaller than the node id, so a single reverse sweep
over the node list visits the graph in topological order.

    >>> tape = Tape()
    >>> x = tape.param("x", np.array([1.0, 2.0, 3.0]))
    >>> loss = squared_norm(x)
    >>> tape.backward(loss)["x"]
    array([2., 4., 6.])
"""

from __future__ import annotations

from typing import Callable, Hashable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tape",
    "Var",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat",
    "gather",
    "scatter",
    "reshape",
    "transpose",
    "tanh",
    "sigmoid",
    "relu",
    "softplus",
    "exp",
    "log",
    "sum",
    "mean",
    "squared_norm",
    "gru_cell",
    "quat_mul",
    "quat_rotate",
    "normalize",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinity from its inputs."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Var:
    """Handle to a node recorded on a tape."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of a computation.

    Leaves created through :meth:`param` are the differentiable inputs;
    :meth:`backward` returns gradients keyed by the names given there.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._rules: list[BackwardFn | None] = []
        self._needs: list[bool] = []
        self._params: dict[Hashable, Var] = {}

    def __len__(self) -> int:
        return len(self._values)

    @property
    def parents(self) -> list[tuple[int, ...]]:
        return list(self._parents)

    def _append(self, value, parents, rule, needs) -> Var:
        node_id = len(self._values)
        self._values.append(value)
        self._parents.append(parents)
        self._rules.append(rule if needs else None)
        self._needs.append(needs)
        return Var(self, node_id, value)

    def needs_grad(self, var: Var) -> bool:
        """Whether any parameter leaf is upstream of ``var``."""
        return self._needs[var.id]

    def param(self, key: Hashable, value) -> Var:
        """Bind a named parameter as a leaf; repeated keys return the same node."""
        if key in self._params:
            return self._params[key]
        var = self._append(np.asarray(value, dtype=np.float64), (), None, True)
        self._params[key] = var
        return var

    def constant(self, value) -> Var:
        return self._append(np.asarray(value, dtype=np.float64), (), None, False)

    def record(self, value, parents: Sequence[Var], rule: BackwardFn, name: str) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{name} produced a non-finite value")
        needs = any(self._needs[p.id] for p in parents)
        return self._append(value, tuple(p.id for p in parents), rule, needs)

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operand belongs to a different tape")
            return x
        return self.constant(x)

    def backward(self, loss: Var) -> dict[Hashable, np.ndarray]:
        """Gradient of a scalar node with respect to every bound parameter."""
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.id + 1)
        grads[loss.id] = np.ones_like(loss.value)
        for node in range(loss.id, -1, -1):
            g = grads[node]
            rule = self._rules[node]
            if g is None or rule is None:
                continue
            for parent, pg in zip(self._parents[node], rule(g)):
                if pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        out = {}
        for key, var in self._params.items():
            g = grads[var.id] if var.id <= loss.id else None
            out[key] = np.zeros_like(var.value) if g is None else g
        return out


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{name}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.sum(g).reshape(shape)
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _broadcast_shape("add", a.value, b.value)
    sa, sb = a.shape, b.shape
    return tape.record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _broadcast_shape("sub", a.value, b.value)
    sa, sb = a.shape, b.shape
    return tape.record(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Var:
    """Elementwise product."""
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _broadcast_shape("mul", a.value, b.value)
    av, bv = a.value, b.value
    return tape.record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def scale(a: Var, c: float) -> Var:
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    need_a, need_b = tape.needs_grad(a), tape.needs_grad(b)

    def rule(g):
        return (g @ bv.T if need_a else None, av.T @ g if need_b else None)

    return tape.record(av @ bv, (a, b), rule, "matmul")


def concat(xs: Sequence, axis: int = -1) -> Var:
    tape = _tape_of(*xs)
    xs = [tape.lift(x) for x in xs]
    vals = [x.value for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]}") from exc
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def rule(g):
        return np.split(g, bounds, axis=axis)

    return tape.record(out, xs, rule, "concat")


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    old = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Var) -> Var:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return a.tape.record(a.value.T, (a,), lambda g: (g.T,), "transpose")


def gather(a: Var, index, axis: int = -1) -> Var:
    """Select entries ``index`` along ``axis``."""
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[axis]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"gather: index out of range for axis of length {n}")
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, _axis_index(out.ndim, axis, index), g)
        return (out,)

    return a.tape.record(np.take(a.value, index, axis=axis), (a,), rule, "gather")


def scatter(a: Var, index, size: int, axis: int = -1) -> Var:
    """Place the entries of ``a`` at positions ``index`` of a zero array of length ``size``."""
    index = np.asarray(index, dtype=np.intp)
    if a.shape[axis] != index.size:
        raise ShapeError(
            f"scatter: operand shape {a.shape} does not match index count {index.size}"
        )
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ShapeError(f"scatter: index out of range for size {size}")
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape)
    sel = _axis_index(out.ndim, axis, index)
    out[sel] = a.value
    return a.tape.record(out, (a,), lambda g: (g[sel],), "scatter")


def _axis_index(ndim: int, axis: int, index: np.ndarray):
    axis = axis % ndim
    return (slice(None),) * axis + (index,)


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape.record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Var) -> Var:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape.record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def softplus(a: Var) -> Var:
    """``log(1 + exp(a))`` evaluated without overflow."""
    x = a.value
    y = np.logaddexp(0.0, x)
    return a.tape.record(y, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),), "softplus")


def exp(a: Var) -> Var:
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return a.tape.record(y, (a,), lambda g: (g * y,), "exp")


def log(a: Var) -> Var:
    x = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return a.tape.record(y, (a,), lambda g: (g / x,), "log")


def sum(a: Var) -> Var:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return a.tape.record(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Var) -> Var:
    shape, n = a.shape, a.value.size
    return a.tape.record(
        np.mean(a.value), (a,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def squared_norm(a: Var) -> Var:
    x = a.value
    return a.tape.record(np.sum(x * x), (a,), lambda g: (2.0 * float(g) * x,), "squared_norm")


def gru_cell(x: Var, h: Var, w_in: Var, w_hid: Var, b_in: Var, b_hid: Var) -> Var:
    """One GRU step for a batch.

    Gate columns are ordered (update, reset, candidate); the new state is
    ``(1 - u) * n + u * h``.
    """
    tape = _tape_of(x, h, w_in, w_hid, b_in, b_hid)
    x, h = tape.lift(x), tape.lift(h)
    xv, hv = x.value, h.value
    wi, wh, bi, bh = w_in.value, w_hid.value, b_in.value, b_hid.value
    size = hv.shape[-1]
    if (
        xv.ndim != 2
        or hv.ndim != 2
        or xv.shape[0] != hv.shape[0]
        or wi.shape != (xv.shape[1], 3 * size)
        or wh.shape != (size, 3 * size)
        or bi.shape != (3 * size,)
        or bh.shape != (3 * size,)
    ):
        raise ShapeError(
            f"gru_cell: input {xv.shape} / hidden {hv.shape} do not match weights "
            f"{wi.shape}, {wh.shape}"
        )
    a = xv @ wi + bi
    c = hv @ wh + bh
    u = 0.5 * (1.0 + np.tanh(0.5 * (a[:, :size] + c[:, :size])))
    r = 0.5 * (1.0 + np.tanh(0.5 * (a[:, size : 2 * size] + c[:, size : 2 * size])))
    cn = c[:, 2 * size :]
    n = np.tanh(a[:, 2 * size :] + r * cn)
    out = (1.0 - u) * n + u * hv
    need_x, need_h = tape.needs_grad(x), tape.needs_grad(h)
    h_zero = not need_h and not np.any(hv)

    def rule(g):
        dn = g * (1.0 - u) * (1.0 - n * n)
        du = g * (hv - n) * u * (1.0 - u)
        dr = dn * cn * r * (1.0 - r)
        da = np.concatenate([du, dr, dn], axis=1)
        dc = np.concatenate([du, dr, dn * r], axis=1)
        return (
            da @ wi.T if need_x else None,
            g * u + dc @ wh.T if need_h else None,
            xv.T @ da,
            np.zeros_like(wh) if h_zero else hv.T @ dc,
            da.sum(axis=0),
            dc.sum(axis=0),
        )

    return tape.record(out, (x, h, w_in, w_hid, b_in, b_hid), rule, "gru_cell")


def _hamilton(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def _conj(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b) -> Var:
    """Hamilton product over the trailing axis of length 4, (w, x, y, z) order."""
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if av.shape[-1:] != (4,) or bv.shape[-1:] != (4,):
        raise ShapeError(f"quat_mul: incompatible shapes {av.shape} and {bv.shape}")
    _broadcast_shape("quat_mul", av, bv)

    def rule(g):
        # d<g, a*b>/da = g * conj(b), d/db = conj(a) * g
        return (
            _unbroadcast(_hamilton(g, _conj(bv)), av.shape),
            _unbroadcast(_hamilton(_conj(av), g), bv.shape),
        )

    return tape.record(_hamilton(av, bv), (a, b), rule, "quat_mul")


def quat_rotate(q, v) -> Var:
    """Rotate 3-vectors ``v`` by quaternions ``q`` (assumed unit) using R(q) v."""
    tape = _tape_of(q, v)
    q, v = tape.lift(q), tape.lift(v)
    qv, vv = q.value, v.value
    if qv.shape[-1:] != (4,) or vv.shape[-1:] != (3,) or qv.shape[:-1] != np.broadcast_shapes(
        qv.shape[:-1], vv.shape[:-1]
    ):
        raise ShapeError(f"quat_rotate: incompatible shapes {qv.shape} and {vv.shape}")
    w = qv[..., :1]
    u = qv[..., 1:]
    t = 2.0 * np.cross(u, vv)
    out = vv + w * t + np.cross(u, t)

    def rule(g):
        # out = v + 2w(u x v) + 2 u x (u x v)
        #     = v + 2w(u x v) + 2(u (u.v) - v (u.u))
        uv = np.sum(u * vv, axis=-1, keepdims=True)
        uu = np.sum(u * u, axis=-1, keepdims=True)
        gu = np.sum(g * u, axis=-1, keepdims=True)
        gv = np.sum(g * vv, axis=-1, keepdims=True)
        dw = 2.0 * np.sum(g * np.cross(u, vv), axis=-1, keepdims=True)
        du = 2.0 * w * np.cross(vv, g) + 2.0 * (g * uv + vv * gu) - 4.0 * u * gv
        dv = g - 2.0 * w * np.cross(u, g) + 2.0 * u * gu - 2.0 * uu * g
        return (
            np.concatenate([dw, du], axis=-1),
            _unbroadcast(dv, vv.shape),
        )

    return tape.record(out, (q, v), rule, "quat_rotate")


def normalize(a: Var, eps: float = 1e-12) -> Var:
    """Scale each trailing-axis vector to unit Euclidean length."""
    x = a.value
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + eps)
    y = x / n

    def rule(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / n,)

    return a.tape.record(y, (a,), rule, "normalize")
