"""Dense float64 tensors with reverse-mode gradient accumulation.

Every differentiable building block the encoder, the adapters, and the
contrastive loss need lives here: matmul (plain and stacked-batch),
elementwise add/mul with last-axis broadcast, softmax / log-softmax,
layer norm, relu, embedding lookup, L2 normalization, concat/narrow,
and reductions.  Backward passes accumulate into ``.grad`` buffers, so
calling ``backward`` twice doubles every gradient.

All math is float64; checkpoints downcast to float32 only at
serialization time.  A central-difference ``grad_check`` oracle verifies
analytic gradients for any scalar-valued composition.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

log = logging.getLogger(__name__)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A flat row-major float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; adds into ``.grad`` buffers."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        out_grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = out_grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node._accumulate(g)  # leaf
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    if parent._backward is None:
                        parent._accumulate(pg)
                    else:
                        buf = out_grads.get(id(parent))
                        if buf is None:
                            out_grads[id(parent)] = pg.copy()
                        else:
                            buf += pg

    def item(self) -> float:
        return float(self.data.reshape(()))

    def sum(self) -> "Tensor":
        out = _node(np.sum(self.data, keepdims=False), (self,))
        if out._parents:
            shape = self.data.shape

            def bwd(g):
                return [(self, np.full(shape, g))]

            out._backward = bwd
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        out = _node(np.mean(self.data), (self,))
        if out._parents:
            shape = self.data.shape

            def bwd(g):
                return [(self, np.full(shape, g / n))]

            out._backward = bwd
        return out

    def reshape(self, *shape: int) -> "Tensor":
        old = self.data.shape
        out = _node(self.data.reshape(shape), (self,))
        if out._parents:

            def bwd(g):
                return [(self, g.reshape(old))]

            out._backward = bwd
        return out

    # Arithmetic sugar; scalars and tensors both work where documented.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named tensor with a trainable flag; frozen ones never get updates."""

    __slots__ = ("tensor", "id", "_trainable")

    def __init__(self, data, trainable: bool, id: str):
        self.tensor = Tensor(data, requires_grad=trainable)
        self.id = id
        self._trainable = bool(trainable)

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self._trainable = bool(value)
        self.tensor.requires_grad = self._trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.tensor.shape}, trainable={self._trainable})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """A graph leaf that never receives gradients."""
    return Tensor(data, requires_grad=False)


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _unbroadcast_suffix(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over leading axes added by suffix-shape broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.data.ndim <= a.data.ndim and a.shape[a.data.ndim - b.data.ndim :] == b.shape:
        return
    raise ShapeError(f"{op}: shape {b.shape} does not match {a.shape} or a suffix of it")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-axes slice of ``a``'s shape."""
    _check_suffix(a, b, "add")
    out = _node(a.data + b.data, (a, b))
    if out._parents:
        b_shape = b.data.shape

        def bwd(g):
            return [(a, g), (b, _unbroadcast_suffix(g, b_shape))]

        out._backward = bwd
    return out


def neg(a: Tensor) -> Tensor:
    out = _node(-a.data, (a,))
    if out._parents:
        out._backward = lambda g: [(a, -g)]
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python float (no gradient w.r.t. ``c``)."""
    out = _node(a.data * c, (a,))
    if out._parents:
        out._backward = lambda g: [(a, g * c)]
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may broadcast over trailing axes of ``a``."""
    _check_suffix(a, b, "mul")
    out = _node(a.data * b.data, (a, b))
    if out._parents:
        b_shape = b.data.shape

        def bwd(g):
            return [(a, g * b.data), (b, _unbroadcast_suffix(g * a.data, b_shape))]

        out._backward = bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports (m,k)@(k,n) plus stacked batches on either operand following
    numpy matmul semantics; gradients for a shared (unbatched) operand are
    summed over the batch.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents disagree: {a.data.shape} @ {b.data.shape}"
        )
    out = _node(a.data @ b.data, (a, b))
    if out._parents:
        a_shape, b_shape = a.data.shape, b.data.shape

        def bwd(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            if ga.shape != a_shape:
                ga = ga.sum(axis=tuple(range(ga.ndim - len(a_shape))))
            if gb.shape != b_shape:
                gb = gb.sum(axis=tuple(range(gb.ndim - len(b_shape))))
            return [(a, ga), (b, gb)]

        out._backward = bwd
    return out


def transpose_last2(a: Tensor) -> Tensor:
    """Swap the last two axes (materialized as a contiguous copy)."""
    out = _node(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)), (a,))
    if out._parents:
        out._backward = lambda g: [(a, np.swapaxes(g, -1, -2))]
    return out


def relu(a: Tensor) -> Tensor:
    out = _node(np.maximum(a.data, 0.0), (a,))
    if out._parents:
        mask = a.data > 0.0
        out._backward = lambda g: [(a, g * mask)]
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = _node(y, (a,))
    if out._parents:

        def bwd(g):
            dot = np.sum(g * y, axis=axis, keepdims=True)
            return [(a, y * (g - dot))]

        out._backward = bwd
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Log-softmax via max-subtracted log-sum-exp."""
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    out = _node(y, (a,))
    if out._parents:
        sm = np.exp(y)

        def bwd(g):
            return [(a, g - sm * np.sum(g, axis=axis, keepdims=True))]

        out._backward = bwd
    return out


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm.

    Rows with norm <= eps come back as zeros with a logged diagnostic
    instead of dividing by ~0.
    """
    norm = np.linalg.norm(a.data, axis=-1, keepdims=True)
    degenerate = norm <= eps
    if np.any(degenerate):
        log.warning("l2_normalize: %d near-zero vector(s) mapped to zero", int(degenerate.sum()))
    safe = np.where(degenerate, 1.0, norm)
    y = np.where(degenerate, 0.0, a.data / safe)
    out = _node(y, (a,))
    if out._parents:

        def bwd(g):
            dot = np.sum(g * y, axis=-1, keepdims=True)
            ga = np.where(degenerate, 0.0, (g - y * dot) / safe)
            return [(a, ga)]

        out._backward = bwd
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-dimension gain and bias."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match the last extent")
    mu = np.mean(a.data, axis=-1, keepdims=True)
    var = np.var(a.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = _node(xhat * gain.data + bias.data, (a, gain, bias))
    if out._parents:

        def bwd(g):
            gxhat = g * gain.data
            m1 = np.mean(gxhat, axis=-1, keepdims=True)
            m2 = np.mean(gxhat * xhat, axis=-1, keepdims=True)
            ga = inv * (gxhat - m1 - xhat * m2)
            reduce_axes = tuple(range(g.ndim - 1))
            ggain = np.sum(g * xhat, axis=reduce_axes)
            gbias = np.sum(g, axis=reduce_axes)
            return [(a, ga), (gain, ggain), (bias, gbias)]

        out._backward = bwd
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id; raises IndexError when out of range."""
    idx = np.asarray(ids, dtype=np.int64)
    v = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"token id out of vocabulary range [0, {v})")
    out = _node(table.data[idx], (table,))
    if out._parents:
        d = table.data.shape[1]

        def bwd(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.ravel(), g.reshape(-1, d))
            return [(table, gt)]

        out._backward = bwd
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    out = _node(np.concatenate([t.data for t in parts], axis=axis), (*parts,))
    if out._parents:
        sizes = [t.data.shape[axis] for t in parts]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            pieces = np.split(g, splits, axis=axis)
            return list(zip(parts, pieces))

        out._backward = bwd
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    out = _node(a.data[tuple(sl)].copy(), (a,))
    if out._parents:
        shape = a.data.shape
        index = tuple(sl)

        def bwd(g):
            ga = np.zeros(shape)
            ga[index] = g
            return [(a, ga)]

        out._backward = bwd
    return out


def expand_batch(a: Tensor, n: int) -> Tensor:
    """Repeat a tensor along a new leading axis of size ``n``."""
    out = _node(np.broadcast_to(a.data, (n, *a.data.shape)).copy(), (a,))
    if out._parents:
        out._backward = lambda g: [(a, g.sum(axis=0))]
    return out


def diag_part(a: Tensor) -> Tensor:
    """Main diagonal of a square matrix as a 1-D tensor."""
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise ShapeError(f"diag_part expects a square matrix, got {a.shape}")
    n = a.data.shape[0]
    out = _node(np.diagonal(a.data).copy(), (a,))
    if out._parents:

        def bwd(g):
            ga = np.zeros((n, n))
            np.fill_diagonal(ga, g)
            return [(a, ga)]

        out._backward = bwd
    return out


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` must return a scalar tensor.  The error per coordinate is
    |analytic - numeric| / max(1, |analytic|); the maximum over every
    coordinate of every input is returned.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step size h={h} outside [1e-7, 1e-4]")
    ins = list(inputs)
    for t in ins:
        t.requires_grad = True
        t.zero_grad()
    out = fn(*ins)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: non-finite function value")
    out.backward()
    worst = 0.0
    for t in ins:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn(*ins).item()
            flat[i] = orig - h
            f_minus = fn(*ins).item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("grad_check: non-finite intermediate value")
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            worst = max(worst, err)
    return worst
