"""Dense tensor with reverse-mode automatic differentiation.

Just enough operations for a decoder-only transformer with routed expert
feed-forward layers. Parameters and activations live in 32-bit floats;
reductions (matmul inner products, softmax sums, loss means) accumulate in
64 bits before rounding back. Passing float64 tensors keeps everything in
64 bits, which the gradient-check tests use for clean finite differences.

The computation graph is recorded implicitly through parent references on
each result tensor; ``backward`` on a scalar loss walks it once in reverse
topological order and raises if asked to walk the same graph twice.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterator, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on invalid use of the recorded graph (double backward, etc.)."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording, e.g. for evaluation passes."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # float32 is the default storage; float64 only when handed an
        # explicit float64 ndarray (the gradient-check path).
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data
        else:
            arr = np.asarray(data)
            if arr.dtype != np.float32:
                arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate gradients of every requires_grad leaf reachable from this scalar."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar, got shape {self.data.shape}")
        if self._backward is None and not self._parents:
            raise GraphError("backward on a detached tensor (no recorded graph)")
        order = topo_order(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None  # second replay without reset is a bug
                node._parents = ()
            if node is not self and not node.requires_grad:
                node.grad = None

    # convenience wrappers so model code reads naturally
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return multiply(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Graph:
    """Topologically ordered record of the operations behind one tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)


def topo_order(root: Tensor) -> list[Tensor]:
    """Every operation after all of its inputs' producers (iterative DFS)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def trace(root: Tensor) -> Graph:
    return Graph(topo_order(root))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc_dtype(*tensors: Tensor):
    return np.float64


def _out_dtype(*tensors: Tensor):
    if any(t.data.dtype == np.float64 for t in tensors):
        return np.float64
    return np.float32


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"multiply: incompatible shapes {a.shape} and {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    data = (a.data * a.data.dtype.type(s))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * a.data.dtype.type(s))

    return _result(data, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(np.transpose(g, inv)))

    return _result(data, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _result(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(piece)

    return _result(data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked batches with identical leading dims."""
    ash, bsh = a.shape, b.shape
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {ash} and {bsh}")
    if ash[-1] != bsh[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {ash} and {bsh}")
    if a.data.ndim != b.data.ndim or ash[:-2] != bsh[:-2]:
        if not (a.data.ndim == 2 or b.data.ndim == 2):
            raise ShapeError(f"matmul: leading dimensions disagree for shapes {ash} and {bsh}")

    out_dt = _out_dtype(a, b)
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    data = np.matmul(a64, b64).astype(out_dt)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        if a.requires_grad:
            ga = np.matmul(g64, np.swapaxes(b64, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape).astype(a.data.dtype))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a64, -1, -2), g64)
            b.accumulate_grad(_unbroadcast(gb, b.shape).astype(b.data.dtype))

    return _result(data, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; sums accumulate in 64 bits."""
    x64 = x.data.astype(np.float64, copy=False)
    shifted = x64 - x64.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y64 = e / e.sum(axis=axis, keepdims=True)
    data = y64.astype(_out_dtype(x))

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        inner = (g64 * y64).sum(axis=axis, keepdims=True)
        gx = y64 * (g64 - inner)
        if x.requires_grad:
            x.accumulate_grad(gx.astype(x.data.dtype))

    return _result(data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({h},), got {gain.shape} and {bias.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x64 = x.data.astype(np.float64, copy=False)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_dt = _out_dtype(x, gain, bias)
    data = (xhat * gain.data.astype(np.float64) + bias.data.astype(np.float64)).astype(out_dt)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        gxhat = g64 * gain.data.astype(np.float64)
        if x.requires_grad:
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
            x.accumulate_grad(gx.astype(x.data.dtype))
        if gain.requires_grad:
            gg = (g64 * xhat).reshape(-1, h).sum(axis=0)
            gain.accumulate_grad(gg.astype(gain.data.dtype))
        if bias.requires_grad:
            gb = g64.reshape(-1, h).sum(axis=0)
            bias.accumulate_grad(gb.astype(bias.data.dtype))

    return _result(data, (x, gain, bias), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-form GELU."""
    x64 = x.data.astype(np.float64, copy=False)
    cdf = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    data = (x64 * cdf).astype(_out_dtype(x))

    def backward(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x64 * x64) * _INV_SQRT2PI
            gx = g.astype(np.float64, copy=False) * (cdf + x64 * pdf)
            x.accumulate_grad(gx.astype(x.data.dtype))

    return _result(data, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; identity when eval or p == 0."""
    if not train or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    data = x.data * keep

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * keep)

    return _result(data, (x,), backward)


# ---------------------------------------------------------------------------
# gather / scatter


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer index; gradient is a scatter-add."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: index out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table.accumulate_grad(gt)

    return _result(data, (table,), backward)


gather_rows = embedding_lookup


def scatter_rows(x: Tensor, idx: np.ndarray, out_rows: int) -> Tensor:
    """Scatter-add rows of a 2-D tensor into ``out_rows`` rows; grad gathers back."""
    idx = np.asarray(idx)
    data = np.zeros((out_rows,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(data, idx, x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g[idx])

    return _result(data, (x,), backward)


def take_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather x[rows[i], cols[i]] into a vector; grad scatters back."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if x.data.ndim != 2 or rows.shape != cols.shape:
        raise ShapeError(f"take_pairs: expected 2-D x and matching index vectors, got {x.shape}")
    data = x.data[rows, cols]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (rows, cols), g)
            x.accumulate_grad(gx)

    return _result(data, (x,), backward)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a 2-D tensor by scalar s[i]."""
    if x.data.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: expected x [n, h] and s [n], got {x.shape} and {s.shape}")
    data = x.data * s.data[:, None]

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * s.data[:, None])
        if s.requires_grad:
            s.accumulate_grad((g.astype(np.float64) * x.data.astype(np.float64)).sum(axis=1).astype(s.data.dtype))

    return _result(data, (x, s), backward)


# ---------------------------------------------------------------------------
# reductions and loss


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    x64 = x.data.astype(np.float64, copy=False)
    data = np.asarray(x64.sum(axis=axis)).astype(_out_dtype(x))

    def backward(g):
        if x.requires_grad:
            if axis is None:
                gx = np.broadcast_to(g, x.shape)
            else:
                gx = np.broadcast_to(np.expand_dims(g, axis), x.shape)
            x.accumulate_grad(gx.astype(x.data.dtype))

    return _result(data, (x,), backward)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis), 1.0 / n)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int = -1) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    ``logits`` is [t, V]; positions whose target equals ``ignore_id`` drop out
    of both the mean and the gradient.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [t, V], got {logits.shape}")
    t, v = logits.shape
    if targets.shape != (t,):
        raise ShapeError(f"cross_entropy: targets must be [{t}], got {targets.shape}")
    mask = targets != ignore_id
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is ignored, loss undefined")
    tgt = np.where(mask, targets, 0)
    if tgt.min() < 0 or tgt.max() >= v:
        raise IndexError(f"cross_entropy: target id out of range for vocab {v}")

    x64 = logits.data.astype(np.float64, copy=False)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    nll = lse - shifted[np.arange(t), tgt]
    data = np.asarray((nll * mask).sum() / count).astype(_out_dtype(logits))

    def backward(g):
        if logits.requires_grad:
            p = np.exp(shifted - lse[:, None])
            p[np.arange(t), tgt] -= 1.0
            p *= (mask / count)[:, None]
            logits.accumulate_grad((p * float(g)).astype(logits.data.dtype))

    return _result(data, (logits,), backward)


# ---------------------------------------------------------------------------
# non-differentiable helpers


def argmax(x: Tensor | np.ndarray, axis: int = -1) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return data.argmax(axis=axis)


def top_k(values: Tensor | np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k along the last axis, ties broken by lower index.

    Returns (values, indices), both sorted by descending value.
    """
    data = values.data if isinstance(values, Tensor) else np.asarray(values)
    if not 1 <= k <= data.shape[-1]:
        raise ValueError(f"top_k: k={k} out of range for axis length {data.shape[-1]}")
    order = np.argsort(-data, axis=-1, kind="stable")
    idx = order[..., :k]
    return np.take_along_axis(data, idx, axis=-1), idx
