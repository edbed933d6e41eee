"""Minimal reverse-mode autodiff on numpy arrays.

Operations record themselves on the innermost active :class:`Tape`.  Outside
of any tape nothing is recorded, which doubles as a ``no_grad`` mode.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DTYPE = np.float32
_TAPES: list["Tape"] = []
_BRANCHES: "BranchLog | None" = None


class BranchLog:
    """Branch selections of piecewise ops (kink sides, argmax picks) in call order.

    In record mode every selection is appended to ``selections``.  In replay
    mode each op receives the selection recorded at the same position instead
    of computing its own, so the function is evaluated on a fixed linear
    piece; the selection the op would have made is kept in ``natural``.
    """

    def __init__(self, replay: list | None = None):
        self.replay = replay
        self.selections: list[np.ndarray] = []
        self.natural: list[np.ndarray] = []

    def take(self, compute: Callable[[], np.ndarray]) -> np.ndarray:
        sel = compute()
        if self.replay is None:
            self.selections.append(sel)
            return sel
        pos = len(self.natural)
        if pos >= len(self.replay) or self.replay[pos].shape != sel.shape:
            raise RuntimeError("branch replay does not match the recorded computation")
        self.natural.append(sel)
        return self.replay[pos]

    def crossed(self) -> bool:
        """True when some op would have picked a different branch than the replayed one."""
        return any(not np.array_equal(a, b) for a, b in zip(self.natural, self.replay or []))


@contextlib.contextmanager
def branch_log(replay: list | None = None) -> Iterator[BranchLog]:
    global _BRANCHES
    saved = _BRANCHES
    _BRANCHES = BranchLog(replay)
    try:
        yield _BRANCHES
    finally:
        _BRANCHES = saved


def branch(compute: Callable[[], np.ndarray]) -> np.ndarray | None:
    """Selection for a piecewise op, or None when no log is active (ops use their fast path)."""
    return None if _BRANCHES is None else _BRANCHES.take(compute)


def default_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision64() -> Iterator[None]:
    """Switch newly created tensors to float64 (used for gradient checking)."""
    global _DTYPE
    saved = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = saved


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense float array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data: np.ndarray = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic -----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _not_scalar(shape) -> float:
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


class Tape:
    """Ordered record of differentiable operations.

    A tape may be entered several times while a computation is being built,
    but :meth:`backward` consumes it.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise RuntimeError("tape has already been consumed by backward()")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn: BackwardFn) -> None:
        self._records.append((out, parents, fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if self._consumed:
            raise RuntimeError("tape has already been consumed by backward()")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._leaf:
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                    else:
                        parent.grad += pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        if loss._leaf and loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        self._records.clear()


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording it when a tape is active and a parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._leaf = True
    out.name = None
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._leaf = False
        tape.record(out, tuple(parents), fn)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data + b.data, (a, b),
                lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data - b.data, (a, b),
                lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data * b.data, (a, b),
                lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def fn(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return make(out, (a, b), fn)


def log(x: Tensor) -> Tensor:
    return make(np.log(x.data), (x,), lambda g: (g / x.data,))


def _clip_side(x: np.ndarray, lo: float | None, hi: float | None) -> np.ndarray:
    side = np.zeros(x.shape, dtype=np.int8)
    if lo is not None:
        side[x < lo] = -1
    if hi is not None:
        side[x > hi] = 1
    return side


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient is zero where clipping is active."""
    side = branch(lambda: _clip_side(x.data, lo, hi))
    if side is None:
        out = np.clip(x.data, lo, hi)
    else:
        out = x.data.copy()
        out[side == -1] = lo
        out[side == 1] = hi

    def fn(g):
        return (g * ((_clip_side(x.data, lo, hi) if side is None else side) == 0),)

    return make(out, (x,), fn)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    pick_a = branch(lambda: np.broadcast_to(a.data >= b.data, np.broadcast_shapes(a.shape, b.shape)))
    if pick_a is None:
        pick_a = a.data >= b.data
    return make(np.where(pick_a, a.data, b.data), (a, b),
                lambda g: (unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make(np.asarray(out), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))
