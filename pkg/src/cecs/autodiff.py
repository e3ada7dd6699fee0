"""Dense float64 tensors with a reverse-mode tape.

Every primitive checks shapes at its boundary, refuses to emit non-finite
values, and (when a tape is active and an operand requires a gradient)
appends a record holding the closure that maps the output adjoint to the
operand adjoints.  ``backward`` replays those records in reverse.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "GRUWeights",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "matvec",
    "linear",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "scaled_softmax",
    "sum_",
    "mean",
    "reshape",
    "broadcast_to",
    "concat",
    "stack",
    "take_rows",
    "pick",
    "select",
    "gru_cell",
    "backward",
    "grad_check",
    "GradCheckResult",
    "inject_fault",
]


class Tensor:
    """A float64 array plus a flag saying whether gradients flow into it."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of primitive applications.

    Use as a context manager; while active, primitives append to it.
    Tapes nest, the innermost one records.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def _append(self, rec: _Record) -> None:
        self.records.append(rec)
        self._outputs.add(id(rec.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str):
    """Deliberately corrupt a backward rule (mutation testing only).

    Known faults: ``"gru_update_gate_sign"``.
    """
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: produced a non-finite value")
    return arr


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _finite(out, op)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = needs
    result.name = None
    tape = Tape.active()
    if needs and tape is not None:
        tape._append(_Record(op, inputs, result, vjp))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a constant that is not itself differentiated."""
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _stable_sigmoid(a.data)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log: argument must be positive")
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


# ---------------------------------------------------------------- linear maps


def matmul(a, b) -> Tensor:
    """``np.matmul`` on operands of rank >= 2, batch dims may broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", ad @ bd, (a, b), vjp)


def matvec(m, x) -> Tensor:
    """``out[..., i] = sum_j m[i, j] * x[..., j]`` for ``m`` of shape (r, c)."""
    m, x = as_tensor(m), as_tensor(x)
    if m.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != m.shape[1]:
        raise ShapeError(f"matvec: matrix shape {m.shape} does not accept vector shape {x.shape}")
    md, xd = m.data, x.data

    def vjp(g):
        gm = np.tensordot(g, xd, axes=(list(range(g.ndim - 1)), list(range(xd.ndim - 1))))
        return gm, g @ md

    return _emit("matvec", xd @ md.T, (m, x), vjp)


def linear(x, w, b) -> Tensor:
    return add(matvec(w, x), b)


# ---------------------------------------------------------------- reductions


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.data.ndim
    return _emit("sum", a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("mean: empty tensor")
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def scaled_softmax(scores, d_dim: int) -> Tensor:
    """Softmax of ``scores / sqrt(d_dim)`` over the last axis."""
    scores = as_tensor(scores)
    if scores.data.ndim < 1 or scores.shape[-1] < 1:
        raise ShapeError(f"scaled_softmax: need at least one score, got shape {scores.shape}")
    if d_dim < 1:
        raise ShapeError(f"scaled_softmax: d_dim must be >= 1, got {d_dim}")
    if not np.all(np.isfinite(scores.data)):
        raise NumericError("scaled_softmax: non-finite score")
    c = 1.0 / math.sqrt(d_dim)
    z = scores.data * c
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (c * p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("scaled_softmax", p, (scores,), vjp)


# ---------------------------------------------------------------- structure


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {shape}") from None
    return _emit("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat: nothing to join")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]}: {exc}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit("concat", out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("stack: nothing to stack")
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([p.data for p in parts], axis=axis)
    n = len(parts)
    return _emit("stack", out, parts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: rows of a 2-d ``table`` at integer ``ids`` of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise UsageError(f"take_rows: id out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def vjp(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _emit("take_rows", table.data[ids], (table,), vjp)


def pick(p, index) -> Tensor:
    """Select one entry along the axis 1 of ``p`` for each leading row.

    For ``p`` of shape (B, N) returns ``p[b, index[b]]`` (shape (B,)); for
    ``p`` of shape (B, N, d) returns rows ``p[b, index[b], :]`` (shape (B, d)).
    """
    p = as_tensor(p)
    index = np.asarray(index, dtype=np.int64)
    if p.data.ndim < 1 or index.shape != p.shape[:1] or p.data.ndim > 3:
        raise ShapeError(f"pick: values {p.shape} vs index {index.shape}")
    n = p.shape[1] if p.data.ndim > 1 else 0
    if index.size and (index.min() < 0 or index.max() >= n):
        raise UsageError(f"pick: index out of range 0..{n - 1}")
    rows = np.arange(p.shape[0])
    shape = p.shape

    def vjp(g):
        gp = np.zeros(shape)
        gp[rows, index] = g
        return (gp,)

    return _emit("pick", p.data[rows, index], (p,), vjp)


def select(values, index) -> Tensor:
    """``values[..., index, :]`` with ``index`` indexing the candidate axis.

    ``values`` has shape (..., N, d) and ``index`` the leading shape ``...``.
    """
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    if values.data.ndim < 2 or index.shape != values.shape[:-2]:
        raise ShapeError(f"select: values {values.shape} vs index {index.shape}")
    n = values.shape[-2]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise UsageError(f"select: index out of range 0..{n - 1}")
    where = index[..., None, None]
    out = np.take_along_axis(values.data, where, axis=-2)[..., 0, :]
    shape = values.shape

    def vjp(g):
        gv = np.zeros(shape)
        np.put_along_axis(gv, where, g[..., None, :], axis=-2)
        return (gv,)

    return _emit("select", out, (values,), vjp)


# ---------------------------------------------------------------- GRU


@dataclass
class GRUWeights:
    """Gate weights; ``w_*`` act on the input, ``u_*`` on the hidden state."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    NAMES = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")

    def tensors(self) -> tuple[Tensor, ...]:
        return tuple(getattr(self, n) for n in self.NAMES)


def gru_cell(x, h, params: GRUWeights) -> Tensor:
    """One GRU step, fused into a single tape record.

    z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br),
    h~ = tanh(Wh x + Uh (r*h) + bh), h' = (1 - z) h + z h~.
    ``x`` and ``h`` may carry leading batch dimensions.
    """
    x, h = as_tensor(x), as_tensor(h)
    ws = params.tensors()
    d = h.shape[-1]
    for n, t in zip(GRUWeights.NAMES, ws):
        want = (d,) if n.startswith("b_") else (d, d if n.startswith("u_") else x.shape[-1])
        if t.shape != want:
            raise ShapeError(f"gru_cell: {n} has shape {t.shape}, expected {want}")
    if x.shape[:-1] != h.shape[:-1]:
        raise ShapeError(f"gru_cell: input shape {x.shape} and hidden shape {h.shape} disagree")
    wz, uz, bz, wr, ur, br, wh, uh, bh = (t.data for t in ws)
    xd, hd = x.data, h.data
    z = _stable_sigmoid(xd @ wz.T + hd @ uz.T + bz)
    r = _stable_sigmoid(xd @ wr.T + hd @ ur.T + br)
    rh = r * hd
    hc = np.tanh(xd @ wh.T + rh @ uh.T + bh)
    out = (1.0 - z) * hd + z * hc
    flip = "gru_update_gate_sign" in _FAULTS

    def outer(a, b):
        return np.tensordot(a, b, axes=(list(range(a.ndim - 1)), list(range(b.ndim - 1))))

    def batch_sum(a):
        return a.reshape(-1, a.shape[-1]).sum(axis=0)

    def vjp(g):
        dz = g * (hc - hd)
        dh = g * (1.0 - z)
        da_h = g * z * (1.0 - hc * hc)
        drh = da_h @ uh
        dr = drh * hd
        dh = dh + drh * r
        da_z = dz * z * (1.0 - z)
        if flip:
            da_z = -da_z
        da_r = dr * r * (1.0 - r)
        dx = da_z @ wz + da_r @ wr + da_h @ wh
        dh = dh + da_z @ uz + da_r @ ur
        return (
            dx,
            dh,
            outer(da_z, xd), outer(da_z, hd), batch_sum(da_z),
            outer(da_r, xd), outer(da_r, hd), batch_sum(da_r),
            outer(da_h, xd), outer(da_h, rh), batch_sum(da_h),
        )

    return _emit("gru_cell", out, (x, h) + ws, vjp)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of scalar ``loss`` w.r.t. every gradient-carrying leaf on ``tape``.

    Leaves that the loss does not depend on map to zeros.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward: loss must be a scalar, got shape {loss.shape}")
    leaves: dict[int, Tensor] = {}
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and not tape.produced(t):
                leaves.setdefault(id(t), t)
    if not tape.produced(loss):
        if loss.requires_grad and id(loss) not in leaves:
            raise UsageError("backward: loss was not produced on this tape")
        if not loss.requires_grad:
            return {t: np.zeros_like(t.data) for t in leaves.values()}
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = adj.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if k in adj:
                adj[k] = adj[k] + gi
            else:
                adj[k] = np.asarray(gi, dtype=np.float64).reshape(t.shape)
    return {t: adj.get(k, np.zeros_like(t.data)) for k, t in leaves.items()}


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple[str, int] | None = None
    errors: list[float] = field(default_factory=list)

    @property
    def vacuous(self) -> bool:
        return self.checked == 0


def grad_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    *,
    coords: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare tape gradients of ``loss_fn`` with central differences.

    ``coords`` caps the number of coordinates checked (sampled without
    replacement across all parameters); ``None`` checks all of them.
    """
    if not 0.0 < eps <= 1e-2:
        raise UsageError(f"grad_check: eps must be in (0, 1e-2], got {eps}")
    names = list(params)
    flat = [(n, i) for n in names for i in range(np.asarray(params[n]).size)]
    if not flat:
        return GradCheckResult(0.0, 0)
    if coords is not None and coords < len(flat):
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(flat), size=coords, replace=False)
        flat = [flat[i] for i in sorted(chosen)]

    base = {n: np.array(params[n], dtype=np.float64) for n in names}
    leaves = {n: Tensor(base[n], requires_grad=True, name=n) for n in names}
    with Tape() as tape:
        loss = loss_fn(leaves)
    grads = backward(tape, loss)

    def evaluate(name, idx, delta):
        arrs = {n: base[n] for n in names}
        arr = base[name].copy()
        arr.reshape(-1)[idx] += delta
        arrs[name] = arr
        try:
            val = loss_fn({n: Tensor(a) for n, a in arrs.items()}).item()
        except NumericError as exc:
            raise NumericError(f"grad_check: loss failed at perturbed {name}[{idx}]: {exc}") from None
        if not math.isfinite(val):
            raise NumericError(f"grad_check: non-finite loss at perturbed {name}[{idx}]")
        return val

    errors = []
    worst, worst_err = None, -1.0
    for name, idx in flat:
        num = (evaluate(name, idx, eps) - evaluate(name, idx, -eps)) / (2.0 * eps)
        ana = float(grads[leaves[name]].reshape(-1)[idx])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        errors.append(err)
        if err > worst_err:
            worst, worst_err = (name, idx), err
    return GradCheckResult(max(errors), len(errors), worst, errors)

