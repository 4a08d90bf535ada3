"""Minimal dense tensors with tape-based reverse-mode differentiation.

Only the operations the FNAC computation graph needs are provided. Every op
allocates a fresh float64 output and, when any input requires a gradient,
appends one record to the active :class:`Tape`.

    >>> x = Tensor([[3.0, 4.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(mul(x, x))
    >>> backward(loss, tape)
    >>> x.grad
    array([[6., 8.]])
"""
from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

EPS = 1e-12

#: Counts of recoverable numerical events (clamped norms, constant maps, ...).
WARNINGS: Counter = Counter()


def warn(key: str, n: int = 1) -> None:
    WARNINGS[key] += n


def reset_warnings() -> None:
    WARNINGS.clear()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Backward was requested on something the tape cannot differentiate."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_op", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._op: Optional[str] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use a dedicated op")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of differentiable operations.

    Used as a context manager to make it the active tape for the current
    thread. Outside any ``with`` block ops record on a per-thread default tape.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self):
        return len(self.records)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def reset(self) -> None:
        self.records.clear()

    def record(self, op, inputs, output, bw) -> None:
        output._op = op
        output._tape = self
        self.records.append(Record(op, tuple(inputs), output, bw))


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = [Tape()]
    return _local.stack


def active_tape() -> Tape:
    return _stack()[-1]


class no_grad:
    """Context manager that disables recording; outputs never require grad."""

    def __enter__(self):
        self.prev = getattr(_local, "grad_enabled", True)
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self.prev
        return False


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], bw) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = None
    out._tape = None
    out.requires_grad = getattr(_local, "grad_enabled", True) and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        active_tape().record(op, inputs, out, bw)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make("add_scalar", a.data + c, (a,), lambda g: (g,))
    _check_same("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same("mul", a, b)
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum keeps NaN visible to divergence checks
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[..., n] + bias[n]`` with the bias broadcast over leading axes."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} and bias {bias.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def broadcast_mul(m: Tensor, feats: Tensor) -> Tensor:
    """Multiply a ``b x 1 x h x w`` map over every channel of ``b x d x h x w`` features."""
    if m.ndim != 4 or feats.ndim != 4 or m.shape[1] != 1 or m.shape[0] != feats.shape[0] \
            or m.shape[2:] != feats.shape[2:]:
        raise ShapeError(f"broadcast_mul: map {m.shape} over features {feats.shape}")

    def bw(g):
        return (g * feats.data).sum(axis=1, keepdims=True), g * m.data

    return _make("broadcast_mul", m.data * feats.data, (m, feats), bw)


# ----------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, or batched over a shared leading axis for 3-D operands."""
    if a.ndim != b.ndim or a.ndim not in (2, 3) or a.shape[-1] != b.shape[-2] \
            or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not agree")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make("matmul", a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise ShapeError("transpose without axes needs a matrix")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes).copy(), (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make("reshape", a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(src),))


def diag(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diag: need a square matrix, got {a.shape}")
    n = a.shape[0]

    def bw(g):
        out = np.zeros((n, n))
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return _make("diag", np.diagonal(a.data).copy(), (a,), bw)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data, requires_grad=False)


# ----------------------------------------------------------------- reductions


def _axes(a: Tensor, axis) -> tuple:
    if axis is None:
        return tuple(range(a.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % a.ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _axes(a, axis)
    src = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(a, axis)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


def avg_pool(x: Tensor) -> Tensor:
    """Spatial average ``b x d x h x w -> b x d``."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool: expected b x d x h x w, got {x.shape}")
    b, d, h, w = x.shape
    hw = h * w
    return _make("avg_pool", x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))


# ------------------------------------------------------------ normalizations


def row_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax of ``x / temperature`` along the last axis, max-stabilized."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y / temperature,)

    return _make("row_softmax", y, (x,), bw)


def row_log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _make("row_log_softmax", y, (x,), bw)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm.

    Norms below ``EPS`` are clamped to ``EPS`` and counted under
    ``WARNINGS["l2_normalize_zero_norm"]``.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    small = norm < EPS
    if small.any():
        warn("l2_normalize_zero_norm", int(small.sum()))
    denom = np.where(small, EPS, norm)
    y = x.data / denom

    def bw(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(small, g, g - y * proj) / denom,)

    return _make("l2_normalize", y, (x,), bw)


def minmax_scale(x: Tensor) -> Tensor:
    """Rescale each row of a 2-D tensor to span [0, 1].

    Constant rows map to 0.5 (no gradient) and are counted under
    ``WARNINGS["minmax_constant"]``.
    """
    if x.ndim != 2:
        raise ShapeError(f"minmax_scale: expected a matrix, got {x.shape}")
    n = x.shape[0]
    rows = np.arange(n)
    lo_idx = x.data.argmin(axis=1)
    hi_idx = x.data.argmax(axis=1)
    lo = x.data[rows, lo_idx][:, None]
    span = x.data[rows, hi_idx][:, None] - lo
    const = span[:, 0] <= 0
    if const.any():
        warn("minmax_constant", int(const.sum()))
    safe = np.where(span > 0, span, 1.0)
    y = np.where(const[:, None], 0.5, (x.data - lo) / safe)

    def bw(g):
        g = np.where(const[:, None], 0.0, g)
        gx = g / safe
        gx[rows, lo_idx] += (g * (y - 1.0)).sum(axis=1) / safe[:, 0]
        gx[rows, hi_idx] -= (g * y).sum(axis=1) / safe[:, 0]
        return (gx,)

    return _make("minmax_scale", y, (x,), bw)


# ------------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = tape if tape is not None else loss._tape
    if loss._tape is not tape:
        raise TapeError("loss was not recorded on the given tape")

    pending = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi


# --------------------------------------------------------------- grad checking


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``x.data``."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        with Tape():
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> dict:
    """Relative error between tape and finite-difference gradients, per parameter.

    ``fn`` must rebuild the scalar from ``params`` on every call.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    errors = {}
    for k, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(fn, p, step)
        errors[p.name or f"param{k}"] = relative_error(analytic, numeric)
    return errors
