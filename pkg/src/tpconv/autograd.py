"""Dense tensors with tape-based reverse-mode differentiation, Adam and a
cosine warm-restart learning-rate schedule.

Usage::

    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = sum_reduce(square(w))
    tape.backward(loss)
    w.grad  # array([2., 4.])

Operations executed outside an active tape are evaluated eagerly and leave
no record, which is what inference uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

_DTYPE = np.float64
_ACTIVE_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        listed = ", ".join(str(s) for s in self.shapes)
        super().__init__(f"{kind}: incompatible operand shapes {listed}")


class NonFiniteError(FloatingPointError):
    pass


def set_precision(precision: str) -> None:
    """Select the dtype used for newly created tensors ('double' or 'single')."""
    global _DTYPE
    if precision == "double":
        _DTYPE = np.float64
    elif precision == "single":
        _DTYPE = np.float32
    else:
        raise ValueError(f"unknown precision {precision!r}")


def default_dtype():
    return _DTYPE


class Tensor:
    """A dense array plus an optional gradient.

    Leaves created with ``requires_grad=True`` are the parameters; everything
    produced by an op on a tape is an interior node.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DTYPE))
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Tape:
    """Ordered record of executed operations for one forward pass."""

    nodes: list[Tensor] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def backward(self, loss: Tensor) -> None:
        """Write dloss/dleaf into ``.grad`` of every leaf on the tape.

        Leaf gradients are reset first, so leaves recorded on the tape but
        not reachable from ``loss`` end up with a zero gradient.
        """
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape)
        if not loss.requires_grad:
            raise ValueError("backward: loss does not depend on any parameter")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in self.nodes:
            for p in node._parents:
                if p.requires_grad and p.is_leaf:
                    p.grad = np.zeros_like(p.data)
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    parent.grad = parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
        self.nodes.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _ACTIVE_TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _ACTIVE_TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum; every index of an operand must occur in the other
    operand or in the output so that the adjoints are einsums too."""
    a, b = _as_tensor(a), _as_tensor(b)
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if any(c not in other and c not in out_sub for c in s):
            raise ValueError(f"einsum {subscripts!r}: index summed within one operand")
    try:
        data = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError:
        raise ShapeError(f"einsum {subscripts}", a.shape, b.shape) from None

    def backward(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True)
        return ga, gb

    return _make(data, (a, b), backward)


def bmm(a, b) -> Tensor:
    """Batched matrix product of stacks (B, p, q) @ (B, q, r)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError("bmm", a.shape, b.shape)
    return _make(np.matmul(a.data, b.data), (a, b),
                 lambda g: (np.matmul(g, b.data.transpose(0, 2, 1)) if a.requires_grad else None,
                            np.matmul(a.data.transpose(0, 2, 1), g) if b.requires_grad else None))


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", *(t.shape for t in tensors))
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(data, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def concat_last_axis(*tensors: Tensor) -> Tensor:
    return concat(tensors, axis=-1)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return _make(data, (a,), lambda g: (g.reshape(src),))


def swap_last_axes(a: Tensor) -> Tensor:
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[index]`` along the first axis for an integer array of any shape."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        # scatter-add as a sparse (rows x gathered) product; np.add.at is slow
        flat = index.reshape(-1)
        scatter = sparse.csr_matrix((np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
                                    shape=(a.shape[0], flat.size))
        ga = scatter @ g.reshape(flat.size, -1)
        return (np.asarray(ga).reshape(a.shape),)

    return _make(a.data[index], (a,), backward)


def take_columns(a: Tensor, columns) -> Tensor:
    """``a[..., columns]`` for a slice or integer list along the last axis."""
    cols = columns if isinstance(columns, slice) else np.asarray(columns, dtype=np.intp)

    def backward(g):
        ga = np.zeros_like(a.data)
        if isinstance(cols, slice):
            ga[..., cols] = g
        else:
            np.add.at(ga, (..., cols), g)
        return (ga,)

    return _make(a.data[..., cols], (a,), backward)


# ---------------------------------------------------------------- reductions


def sum_reduce(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean_reduce(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_reduce(a, axis), 1.0 / max(n, 1))


# ---------------------------------------------------------------- losses


def softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row cross-entropy of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_xent", logits.shape, labels.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = logsum - z[rows, labels]

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * g[:, None],)

    return _make(loss, (logits,), backward)


def sigmoid_xent(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ShapeError("sigmoid_xent", logits.shape, y.shape)
    x = logits.data
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return _make(loss, (logits,), lambda g: (g * (_stable_sigmoid(x) - y),))


def forward_op(kind: str, operands: Sequence) -> Tensor:
    """Dispatch by operation name."""
    table = {
        "matmul": matmul,
        "add": add,
        "concat_last_axis": concat_last_axis,
        "relu": relu,
        "sigmoid": sigmoid,
        "sum_reduce": sum_reduce,
        "mean_reduce": mean_reduce,
        "square": square,
        "softmax_xent": softmax_xent,
        "sigmoid_xent": sigmoid_xent,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------- checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(model_fn: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients with central differences for every scalar of
    every parameter that has ``requires_grad`` set.

    ``model_fn`` takes no arguments and must read the parameters in place.
    """
    trainable = [p for p in params if p.requires_grad]
    for p in trainable:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires double precision parameters")
        p.grad = None
    with Tape() as tape:
        loss = model_fn()
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("grad_check: non-finite loss")
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in trainable]

    worst = 0.0
    per_param = {}
    for n, (p, ga) in enumerate(zip(trainable, analytic)):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        local = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(model_fn().data)
            flat[i] = orig - h
            fm = float(model_fn().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"grad_check: non-finite loss perturbing {p.name or n}[{i}]")
            num = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1e-8)
            local = max(local, err)
        per_param[p.name or f"param{n}"] = local
        worst = max(worst, local)
    return GradCheckReport(worst, per_param, tol)


# ---------------------------------------------------------------- optimisation


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState,
              lr: float) -> OptimizerState:
    """In-place Adam update of ``params``; returns the (mutated) state."""
    if lr <= 0:
        raise ValueError("adam_step: lr must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for {p.name or f'param{i}'}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.data.dtype)
    return state


@dataclass(frozen=True)
class LRSchedule:
    lr_max: float
    lr_min: float
    total_steps: int
    cycle_count: int = 3

    def __post_init__(self):
        if not (0 < self.lr_min <= self.lr_max):
            raise ValueError("LRSchedule: need 0 < lr_min <= lr_max")
        if self.total_steps < 1 or self.cycle_count < 1:
            raise ValueError("LRSchedule: total_steps and cycle_count must be >= 1")


def cosine_lr(step: int, schedule: LRSchedule) -> float:
    """Cosine decay from lr_max to lr_min, restarted ``cycle_count`` times."""
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {schedule.total_steps})")
    cycle_len = schedule.total_steps / schedule.cycle_count
    phase = (step % cycle_len) / cycle_len
    lr = schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * phase))
    return min(max(lr, schedule.lr_min), schedule.lr_max)
