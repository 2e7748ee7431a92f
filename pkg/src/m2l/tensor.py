"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in
execution order, so the tape is topologically sorted by construction and
``Tape.backward`` is a single reverse sweep. Outside a tape, ops are plain
numpy evaluations with no bookkeeping.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
EXP_MAX = 700.0
COSINE_EPS = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, optionally linked to a node on the active tape."""

    __slots__ = ("data", "requires_grad", "tape_id", "_parents", "_backward", "__weakref__")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Wrap an op result and record it on the active tape if any parent needs grad.

    ``backward(g)`` maps the output gradient to one gradient (or None) per parent.
    Custom primitives outside this module register themselves through here.
    """
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape._record(out)
    return out


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; tapes are thread-local and may nest (the
    innermost one records).
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, node: Tensor) -> None:
        node.tape_id = len(self.nodes)
        self.nodes.append(node)

    def backward(self, root: Tensor) -> "Gradients":
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape_id is None or root.tape_id >= len(self.nodes) or self.nodes[root.tape_id] is not root:
            raise ValueError("root is not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        keep: dict[int, Tensor] = {id(root): root}
        for node in reversed(self.nodes[: root.tape_id + 1]):
            g = grads.get(id(node))
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    keep[key] = parent
        return Gradients(grads, keep)


class Gradients:
    """Gradient lookup by tensor; unreachable tensors map to zeros."""

    def __init__(self, grads: dict[int, np.ndarray], keep: dict[int, Tensor]):
        self._grads = grads
        self._keep = keep

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._keep.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self._keep.get(id(t)) is t


def backward(root: Tensor) -> Gradients:
    """Backpropagate through the active tape."""
    tape = _active_tape()
    if tape is None:
        raise ValueError("no active tape")
    return tape.backward(root)


# ---------------------------------------------------------------- elementwise

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return record(ad * bd, (a, b), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return record(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    """exp with inputs clamped above at EXP_MAX (zero gradient past the clamp)."""
    a = as_tensor(a)
    inside = a.data <= EXP_MAX
    e = np.exp(np.minimum(a.data, EXP_MAX))
    return record(e, (a,), lambda g: (g * e * inside,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    d = a.data
    out = np.clip(d, lo, hi)
    mask = np.ones(d.shape, dtype=bool)
    if lo is not None:
        mask &= d >= lo
    if hi is not None:
        mask &= d <= hi
    return record(out, (a,), lambda g: (g * mask,))


def log(a) -> Tensor:
    a = clamp(a, LOG_FLOOR, None)
    d = a.data
    return record(np.log(d), (a,), lambda g: (g / d,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        )

    return record(ad @ bd, (a, b), back)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return record(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return record(out, (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return record(a.data[index], (a,), back)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ax = axis % ts[0].ndim
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return record(out, ts, back)


# ---------------------------------------------------------------- reductions

def _check_axis(a: Tensor, axis: int | None) -> int | None:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(a.data.sum(axis=axis), (a,), back)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    shape = a.shape
    count = a.size if axis is None else shape[axis]

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record(a.data.mean(axis=axis), (a,), back)


def cosine(a, b) -> Tensor:
    """Cosine similarity along the last axis.

    Vectors give a scalar; ``(B, d)`` matrices give ``B`` row similarities.
    Pairs whose norm product is at most COSINE_EPS score 0 with zero gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError(f"cosine: shapes {a.shape} and {b.shape} must match")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    denom = na * nb
    ok = denom > COSINE_EPS
    safe = np.where(ok, denom, 1.0)
    dot = (ad * bd).sum(axis=-1)
    cos = np.where(ok, dot / safe, 0.0)

    def back(g):
        # d cos / da = b / (|a||b|) - cos * a / |a|^2
        scale = np.where(ok, g / safe, 0.0)[..., None]
        gc = g * cos
        ga = gb = None
        if a.requires_grad:
            ga = scale * bd - np.where(ok, gc / np.where(ok, na * na, 1.0), 0.0)[..., None] * ad
        if b.requires_grad:
            gb = scale * ad - np.where(ok, gc / np.where(ok, nb * nb, 1.0), 0.0)[..., None] * bd
        return ga, gb

    return record(cos, (a, b), back)


# ---------------------------------------------------------------- verification

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, per: str = "tensor") -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` recomputes a scalar from the current contents of ``params``; the
    parameters are perturbed in place and restored. With ``per="tensor"`` each
    parameter tensor scores ``|a - n| / max(1e-8, |a| + |n|)`` using L2 norms;
    ``per="element"`` applies the same formula to every scalar entry, which
    bottoms out at the float64 resolution of ``f`` for entries with tiny
    gradients.
    """
    if per not in ("tensor", "element"):
        raise ValueError(f"per must be 'tensor' or 'element', got {per!r}")
    with Tape() as tape:
        root = f()
        grads = tape.backward(root)
    analytic = [grads[p].copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        a = ga.reshape(-1)
        if per == "tensor":
            err = np.linalg.norm(a - numeric) / max(1e-8, np.linalg.norm(a) + np.linalg.norm(numeric))
        else:
            err = np.max(np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric)), initial=0.0)
        worst = max(worst, float(err))
    return worst
