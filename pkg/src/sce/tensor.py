"""Dense float64 tensors with reverse-mode gradients.

Every differentiable op builds its output with :func:`_record`, which stores a
backward closure on the output tensor.  Nodes carry a global sequence number,
so a graph's append order is recoverable from any root and ``backward`` walks
it in strict reverse order.

Only two broadcasting patterns exist: batch-equal ``matmul`` and bias adds
inside ``linear``/``layer_norm``/``conv1d``.  Everything else requires exact
shape matches so wiring bugs fail loudly.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Node:
    __slots__ = ("seq", "op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A float64 array plus an optional gradient slot.

    Leaves created with ``requires_grad=True`` receive ``grad`` (same shape as
    ``data``) on the first backward pass; later passes accumulate into it until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the handful of ops used in tests and formulas
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    t = Tensor._wrap(out)
    if is_grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t._node = _Node(op, tuple(inputs), backward_fn)
    return t


class GradGraph:
    """The recorded nodes reachable from a root, in append order."""

    def __init__(self, tensors: list):
        self.tensors = tensors

    @classmethod
    def from_root(cls, root: Tensor) -> "GradGraph":
        seen = set()
        found = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.inputs)
        found.sort(key=lambda t: t._node.seq)
        return cls(found)

    @property
    def ops(self) -> list:
        return [t._node.op for t in self.tensors]

    def __len__(self) -> int:
        return len(self.tensors)


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``root``.

    Gradients accumulate across calls; reset with ``zero_grad``.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root._node is None:
        _accumulate_leaf(root, np.ones_like(root.data))
        return
    graph = GradGraph.from_root(root)
    pending = {id(root): np.ones_like(root.data)}
    for t in reversed(graph.tensors):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate_leaf(inp, gi)
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + gi
            else:
                pending[id(inp)] = gi


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64)
    else:
        leaf.grad = leaf.grad + g


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _record("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _record("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def mask_rows(x: Tensor, keep: np.ndarray) -> Tensor:
    """Zero every row (last-axis vector) of ``x`` where ``keep`` is False."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape[:-1]:
        raise ShapeError(f"mask_rows: mask {keep.shape} does not match rows of {x.shape}")
    m = keep[..., None].astype(np.float64)
    return _record("mask_rows", x.data * m, (x,), lambda g: (g * m,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    m = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", x.data * m, (x,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("permute", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose_last2 needs >= 2 dims, got {x.shape}")
    return _record("transpose_last2", np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def squeeze(x: Tensor, axis: int) -> Tensor:
    if x.shape[axis] != 1:
        raise ShapeError(f"squeeze: axis {axis} of {x.shape} is not 1")
    old = x.shape
    return _record("squeeze", np.squeeze(x.data, axis=axis), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch dimensions must be equal."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is [in, out]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    xd, wd = x.data, w.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        return g @ wd.T, x2.T @ g2, g2.sum(axis=0)

    return _record("linear", xd @ wd + b.data, (x, w, b), bw)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; output shape is ``ids.shape + (d,)``."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("gather_rows: ids must be integers")
    v, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"gather_rows: id out of vocabulary range [0, {v})")

    def bw(g):
        out = np.zeros((v, d))
        np.add.at(out, ids.reshape(-1), g.reshape(-1, d))
        return (out,)

    return _record("gather_rows", table.data[ids], (table,), bw)


def pick(x: Tensor, idx) -> Tensor:
    """``x[i, idx[i]]`` for a 2-D ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: x {x.shape}, idx {idx.shape}")
    rows = np.arange(x.shape[0])

    def bw(g):
        out = np.zeros(x.shape)
        out[rows, idx] = g
        return (out,)

    return _record("pick", x.data[rows, idx], (x,), bw)


# ---------------------------------------------------------------------------
# normalisation


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-subtracted softmax.

    ``mask`` (broadcastable to ``x``; True = keep) gives masked entries exactly
    zero probability.  A fully masked slice yields all zeros.
    """
    axis = _check_axis(x, axis)
    xd = x.data
    if mask is None:
        z = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        m = np.where(mask, xd, -np.inf).max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, xd - m, 0.0)), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# convolution head


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation over the last axis.

    x: [n, c_in, t], w: [c_out, c_in, k], b: [c_out] -> [n, c_out, t - k + 1]
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv1d: x {x.shape}, w {w.shape}, b {b.shape}")
    n, c_in, t = x.shape
    c_out, _, k = w.shape
    if t < k:
        raise ShapeError(f"conv1d: sequence length {t} shorter than kernel {k}")
    t_out = t - k + 1
    xd, wd = x.data, w.data
    # [n, t, c_in] so each tap is a plain matmul against w[:, :, u].T
    xt = np.ascontiguousarray(xd.transpose(0, 2, 1))
    out = np.zeros((n, t_out, c_out))
    for u in range(k):
        out += xt[:, u:u + t_out, :] @ wd[:, :, u].T
    out += b.data

    def bw(g):
        gt = g.transpose(0, 2, 1)  # [n, t_out, c_out]
        dx = np.zeros((n, t, c_in))
        dw = np.zeros_like(wd)
        g2 = gt.reshape(-1, c_out)
        for u in range(k):
            dx[:, u:u + t_out, :] += gt @ wd[:, :, u]
            dw[:, :, u] = g2.T @ xt[:, u:u + t_out, :].reshape(-1, c_in)
        return dx.transpose(0, 2, 1), dw, g.sum(axis=(0, 2))

    return _record("conv1d", out.transpose(0, 2, 1), (x, w, b), bw)


def global_maxpool1d(x: Tensor) -> Tensor:
    """Max over the time axis: [n, c, t] -> [n, c, 1].

    The gradient goes to the first maximal position only.
    """
    if x.ndim != 3:
        raise ShapeError(f"global_maxpool1d: expected [n, c, t], got {x.shape}")
    idx = x.data.argmax(axis=2)[..., None]
    out = np.take_along_axis(x.data, idx, axis=2)
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape)
        np.put_along_axis(dx, idx, g, axis=2)
        return (dx,)

    return _record("global_maxpool1d", out, (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    skipped: int
    worst_index: Optional[tuple]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    *,
    exclude: Optional[np.ndarray] = None,
    max_coords: Optional[int] = 2000,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``x.grad`` from backward against central differences of ``f``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Coordinates flagged in ``exclude`` are skipped (kinks).  Above
    ``max_coords`` coordinates a seeded random subsample is checked.
    ``x.data`` is perturbed temporarily and restored on exit.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not x.requires_grad:
        raise ValueError("x must require grad")
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    coords = np.arange(x.data.size)
    skipped = 0
    if exclude is not None:
        keep = ~np.broadcast_to(np.asarray(exclude, dtype=bool), x.shape).reshape(-1)
        skipped = int((~keep).sum())
        coords = coords[keep]
    if max_coords is not None and coords.size > max_coords:
        rng = np.random.default_rng(seed)
        coords = np.sort(rng.choice(coords, size=max_coords, replace=False))

    base = x.data
    worst, worst_abs, worst_idx = 0.0, 0.0, None
    try:
        with no_grad():
            for c in coords:
                plus = base.copy()
                plus.reshape(-1)[c] += h
                x.data = plus
                fp = float(f(x).data)
                minus = base.copy()
                minus.reshape(-1)[c] -= h
                x.data = minus
                fm = float(f(x).data)
                num = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[c]
                err = abs(a - num)
                rel = err / max(abs(a), abs(num), floor)
                worst_abs = max(worst_abs, err)
                if rel > worst:
                    worst, worst_idx = rel, np.unravel_index(c, base.shape)
    finally:
        x.data = base
    return GradCheckReport(worst, worst_abs, int(coords.size), skipped,
                           None if worst_idx is None else tuple(int(i) for i in worst_idx), tol)


# ---------------------------------------------------------------------------
# debug dump: shape header, then one row-major value per line


def dump_tensor(t: Tensor, fh) -> None:
    fh.write(" ".join(str(s) for s in t.shape) + "\n")
    for v in t.data.reshape(-1):
        fh.write(repr(float(v)) + "\n")


def load_tensor_dump(fh) -> Tensor:
    header = fh.readline().split()
    shape = tuple(int(s) for s in header)
    values = [float(line) for line in fh if line.strip()]
    expected = int(np.prod(shape)) if shape else 1
    if len(values) != expected:
        raise ValueError(f"dump holds {len(values)} values, header {shape} needs {expected}")
    return Tensor(np.array(values).reshape(shape))
