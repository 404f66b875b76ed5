"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation is a plain function that computes its value
with numpy and, when any input requires a gradient, attaches a :class:`Node`
holding the inputs, the saved intermediates and the backward rule. Nodes get a
monotonically increasing sequence number at creation, so sorting the nodes
reachable from a loss by that number yields a topological order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DetachedTensor, LabelOutOfRange, NotScalar, NumericOverflow, ShapeMismatch

_seq = itertools.count()


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericOverflow("tensor data contains NaN or Inf")
        if any(d <= 0 for d in arr.shape):
            raise ShapeMismatch(f"all dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_multiply(self, float(other))
        return elementwise_multiply(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    forward: Callable
    backward: Callable
    saved: object
    value: np.ndarray
    seq: int = field(default_factory=lambda: next(_seq))


def _apply(op: str, inputs: Sequence[Tensor], forward: Callable, backward: Callable) -> Tensor:
    """Run ``forward`` on the input arrays and record a node if needed.

    ``forward(*arrays) -> (value, saved)`` and
    ``backward(grad_out, saved, *arrays) -> tuple`` with one entry per input
    (``None`` where no gradient flows).
    """
    arrays = [t.data for t in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value, saved = forward(*arrays)
    if not np.all(np.isfinite(value)):
        raise NumericOverflow(f"{op} produced a non-finite value")
    out = Tensor._wrap(value)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), forward, backward, saved, value)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _apply(
        "add", (a, b),
        lambda x, y: (x + y, None),
        lambda g, _, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
    )


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "subtract")
    return _apply(
        "subtract", (a, b),
        lambda x, y: (x - y, None),
        lambda g, _, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
    )


def elementwise_multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "elementwise_multiply")
    return _apply(
        "elementwise_multiply", (a, b),
        lambda x, y: (x * y, None),
        lambda g, _, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def scalar_multiply(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply("scalar_multiply", (a,), lambda x: (x * c, None), lambda g, _, x: (g * c,))


def relu(a: Tensor) -> Tensor:
    return _apply(
        "relu", (a,),
        lambda x: (np.maximum(x, 0.0), None),
        lambda g, _, x: (g * (x > 0),),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never sees a large positive argument
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    def fwd(x):
        s = _sigmoid(x)
        return s, s

    return _apply("sigmoid", (a,), fwd, lambda g, s, x: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    def fwd(x):
        e = np.exp(x)
        return e, e

    return _apply("exp", (a,), fwd, lambda g, e, x: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericOverflow("log of a non-positive value")
    return _apply("log", (a,), lambda x: (np.log(x), None), lambda g, _, x: (g / x,))


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return _apply(
        "matmul", (a, b),
        lambda x, y: (x @ y, None),
        lambda g, _, x, y: (g @ y.T, x.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got {a.shape}")
    return _apply("transpose", (a,), lambda x: (x.T.copy(), None), lambda g, _, x: (g.T,))


def inner_product(a: Tensor, b: Tensor) -> Tensor:
    """Sum of the elementwise product; a scalar (shape ``()``)."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"inner_product: {a.shape} vs {b.shape}")
    return _apply(
        "inner_product", (a, b),
        lambda x, y: (np.asarray(np.dot(x.ravel(), y.ravel())), None),
        lambda g, _, x, y: (g * y, g * x),
    )


# --- convolution and pooling -----------------------------------------------

def _same_pad(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    kh, kw = w.shape[:2]
    cols = np.lib.stride_tricks.sliding_window_view(_same_pad(x, kh, kw), (kh, kw), axis=(1, 2))
    # cols: (B, H, W, Cin, kh, kw)
    return np.einsum("bhwcij,ijco->bhwo", cols, w, optimize=True)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero "same" padding.

    ``x`` is ``(B, H, W, Cin)``, ``w`` is ``(kh, kw, Cin, Cout)`` with odd
    kernel sides, ``b`` is ``(Cout,)``. Output is ``(B, H, W, Cout)``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {w.shape}")
    kh, kw, cin, cout = w.shape
    if cin != x.shape[3]:
        raise ShapeMismatch(f"conv2d: kernel expects {cin} channels, input has {x.shape[3]}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch("conv2d: kernel sides must be odd for same padding")
    if kh > x.shape[1] or kw > x.shape[2]:
        raise ShapeMismatch("conv2d: kernel larger than input")
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias shape {b.shape}, expected ({cout},)")

    def fwd(xa, wa, *ba):
        out = _conv_same(xa, wa)
        if ba:
            out = out + ba[0]
        return out, None

    def bwd(g, _, xa, wa, *ba):
        # input grad: correlate with the flipped, channel-swapped kernel
        gx = _conv_same(g, wa[::-1, ::-1].transpose(0, 1, 3, 2))
        cols = np.lib.stride_tricks.sliding_window_view(_same_pad(xa, kh, kw), (kh, kw), axis=(1, 2))
        gw = np.einsum("bhwcij,bhwo->ijco", cols, g, optimize=True)
        grads = (gx, gw)
        if ba:
            grads += (g.sum(axis=(0, 1, 2)),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _apply("conv2d", inputs, fwd, bwd)


def max_pool(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``×``size`` max pooling over ``(B, H, W, C)``."""
    if x.ndim != 4 or x.shape[1] % size or x.shape[2] % size:
        raise ShapeMismatch(f"max_pool: shape {x.shape} not divisible by {size}")
    bsz, h, w, c = x.shape

    def blocks(xa):
        return (xa.reshape(bsz, h // size, size, w // size, size, c)
                  .transpose(0, 1, 3, 5, 2, 4)
                  .reshape(bsz, h // size, w // size, c, size * size))

    def fwd(xa):
        bl = blocks(xa)
        idx = bl.argmax(axis=-1)
        return np.take_along_axis(bl, idx[..., None], axis=-1)[..., 0], idx

    def bwd(g, idx, xa):
        gb = np.zeros((bsz, h // size, w // size, c, size * size))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(bsz, h // size, w // size, c, size, size)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(bsz, h, w, c))
        return (gx,)

    return _apply("max_pool", (x,), fwd, bwd)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes: ``(B,H,W,C) -> (B,C)`` or ``(H,W,C) -> (C,)``."""
    if x.ndim not in (3, 4):
        raise ShapeMismatch(f"global_average_pool: shape {x.shape}")
    axes = (-3, -2)
    n = x.shape[-3] * x.shape[-2]

    def bwd(g, _, xa):
        return (np.broadcast_to(np.expand_dims(g, axes) / n, xa.shape).copy(),)

    return _apply("global_average_pool", (x,), lambda xa: (xa.mean(axis=axes), None), bwd)


# --- shape manipulation ----------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        np.empty(x.shape).reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}") from None
    return _apply(
        "reshape", (x,),
        lambda xa: (xa.reshape(shape).copy(), None),
        lambda g, _, xa: (g.reshape(xa.shape),),
    )


def flatten(x: Tensor, start_axis: int = 1) -> Tensor:
    """Collapse all axes from ``start_axis`` on (row-major)."""
    lead = x.shape[:start_axis]
    return reshape(x, lead + (int(np.prod(x.shape[start_axis:])),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    try:
        np.concatenate([np.empty(t.shape) for t in xs], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat: incompatible shapes " + str([t.shape for t in xs])) from None
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def fwd(*arrays):
        return np.concatenate(arrays, axis=axis), None

    def bwd(g, _, *arrays):
        return tuple(np.split(g, cuts, axis=axis))

    return _apply("concat", xs, fwd, bwd)


def reduce_sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    def bwd(g, _, xa):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xa.shape).copy(),)

    return _apply("reduce_sum", (x,), lambda xa: (np.asarray(xa.sum(axis=axis)), None), bwd)


def reduce_mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scalar_multiply(reduce_sum(x, axis), 1.0 / count)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    def fwd(xa):
        norm = np.sqrt((xa * xa).sum(axis=axis, keepdims=True))
        if np.any(norm == 0):
            return np.full_like(xa, np.nan), None
        return xa / norm, norm

    def bwd(g, norm, xa):
        y = xa / norm
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _apply("l2_normalize", (x,), fwd, bwd)


# --- losses and stabilized reductions --------------------------------------

def log1p_sum_exp(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """``log(1 + sum(exp(x[mask])))`` along ``axis``, overflow-guarded.

    Entries where ``mask`` is false are treated as absent; a row with no
    selected entries evaluates to ``log 1 = 0``.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)

    def fwd(xa):
        masked = np.where(mask, xa, -np.inf)
        top = np.maximum(masked.max(axis=axis, keepdims=True), 0.0)
        tail = np.where(mask, np.exp(masked - top), 0.0).sum(axis=axis, keepdims=True)
        # top == 0 keeps full relative precision for tiny tails via log1p
        out = np.where(top > 0, top + np.log(np.exp(-top) + tail), np.log1p(tail))
        return np.squeeze(out, axis=axis), out

    def bwd(g, out, xa):
        w = np.where(mask, np.exp(np.where(mask, xa, 0.0) - out), 0.0)
        return (np.expand_dims(g, axis) * w,)

    return _apply("log1p_sum_exp", (x,), fwd, bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` with log-sum-exp stabilization.

    Accepts a single logit vector ``(K,)`` with an int label, or a batch
    ``(B, K)`` with ``B`` labels.
    """
    single = logits.ndim == 1
    lab = np.atleast_1d(np.asarray(labels))
    if logits.ndim not in (1, 2):
        raise ShapeMismatch(f"softmax_cross_entropy: logits shape {logits.shape}")
    k = logits.shape[-1]
    if k < 2:
        raise ShapeMismatch("softmax_cross_entropy needs at least two classes")
    rows = 1 if single else logits.shape[0]
    if lab.shape != (rows,) or not np.issubdtype(lab.dtype, np.integer):
        raise ShapeMismatch(f"softmax_cross_entropy: labels {lab!r} for {rows} rows")
    if np.any(lab < 0) or np.any(lab >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")

    def fwd(za):
        z = za.reshape(rows, k)
        top = z.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(z - top).sum(axis=1))
        per = lse - z[np.arange(rows), lab]
        return np.asarray(per.mean()), lse

    def bwd(g, lse, za):
        z = za.reshape(rows, k)
        p = np.exp(z - lse[:, None])
        p[np.arange(rows), lab] -= 1.0
        return ((g / rows) * p.reshape(za.shape),)

    return _apply("softmax_cross_entropy", (logits,), fwd, bwd)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "subtract": subtract,
    "elementwise_multiply": elementwise_multiply,
    "scalar_multiply": scalar_multiply,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "global_average_pool": global_average_pool,
    "flatten": flatten,
    "concat": lambda *xs, **kw: concat(xs, **kw),
    "inner_product": inner_product,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "max_pool": max_pool,
}


def forward_ops(inputs: Sequence[Tensor], op_kind: str, **kwargs) -> Tensor:
    """Apply the operation named ``op_kind`` to ``inputs`` (see ``OPS``)."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# --- the record and backpropagation ----------------------------------------

class ComputationRecord:
    """The topologically ordered nodes reachable from a set of outputs."""

    def __init__(self, nodes: list[Node], outputs: list[Tensor]):
        self.nodes = nodes
        self.outputs = outputs

    @classmethod
    def trace(cls, *outputs: Tensor) -> "ComputationRecord":
        seen: dict[int, Node] = {}
        stack = [t._node for t in outputs if t._node is not None]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(t._node for t in node.inputs if t._node is not None)
        return cls(sorted(seen.values(), key=lambda n: n.seq), list(outputs))

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        out, seen = [], set()
        for node in self.nodes:
            for t in node.inputs:
                if t._node is None and t.requires_grad and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def replay(self) -> bool:
        """Recompute every node from the leaves; True if all values are bit-identical."""
        values: dict[int, np.ndarray] = {}
        identical = True
        for node in self.nodes:
            arrays = [values.get(id(t._node), t.data) if t._node is not None else t.data
                      for t in node.inputs]
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                value, _ = node.forward(*arrays)
            values[id(node)] = value
            identical &= bool(np.array_equal(value, node.value))
        return identical


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every requires-grad leaf."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) + (0.0 if loss.grad is None else loss.grad)
            return
        raise DetachedTensor("loss is not attached to any computation record")

    record = ComputationRecord.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss._node): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        in_grads = node.backward(g, node.saved, *[t.data for t in node.inputs])
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t._node)
                grads[key] = gi if key not in grads else grads[key] + gi
