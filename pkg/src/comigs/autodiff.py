"""Dense float64 tensors with a define-by-run reverse-mode tape.

A :class:`Tape` is built fresh for every forward pass. Leaves registered with
:meth:`Tape.param` receive gradients from :func:`backward`; tensors created
without a tape are constants and never receive gradients.

Example
-------
>>> tape = Tape()
>>> w = tape.param(np.ones((2, 2)), "w")
>>> loss = sum_all(matmul(w, Tensor(np.eye(2))))
>>> backward(tape, loss)["w"]
array([[1., 1.],
       [1., 1.]])
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tape",
    "Tensor",
    "add",
    "add_const",
    "backward",
    "column",
    "concat_last",
    "cross_entropy",
    "dot_const",
    "embedding",
    "gelu",
    "grad_check",
    "log_sum_exp",
    "matmul",
    "mean",
    "mean_rows",
    "mul",
    "scale",
    "scale_rows",
    "softmax_rows",
    "sum_all",
    "topk_renorm",
    "transpose",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, shapes))}")


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    shape: tuple[int, ...]


class Tensor:
    """A float64 array, optionally bound to a node on a :class:`Tape`."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


@dataclass
class Tape:
    """Append-only record of operations; nodes are stored in topological order."""

    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[str, int] = field(default_factory=dict)

    def param(self, value, name: str | None = None) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, value.shape))
        self.leaves[name if name is not None else f"p{nid}"] = nid
        return Tensor(value, self, nid)

    def _record(self, kind, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
        nid = len(self.nodes)
        self.nodes.append(_Node(kind, tuple(t.node_id for t in inputs), vjp, out.shape))
        return Tensor(out, self, nid)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None and t.node_id is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    return tape


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape._record(kind, inputs, out, vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, vjp)


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError("transpose", x.shape)
    return _emit("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("add", a.shape, b.shape)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def add_const(x: Tensor, c) -> Tensor:
    """``x + c`` where ``c`` is a constant array of the same shape (no gradient)."""
    x = _as_tensor(x)
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.shape:
        raise DimensionError("add_const", x.shape, c.shape)
    return _emit("add_const", (x,), x.data + c, lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``t`` of ``x`` (T x n) by ``w[t]``; ``w`` has shape (T, 1)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.shape != (x.shape[0], 1):
        raise DimensionError("scale_rows", x.shape, w.shape)
    X, W = x.data, w.data

    def vjp(g):
        return g * W, np.sum(g * X, axis=1, keepdims=True)

    return _emit("scale_rows", (x, w), X * W, vjp)


def column(x: Tensor, j: int) -> Tensor:
    """Column ``j`` of a 2-D tensor as a (T, 1) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or not 0 <= j < x.shape[1]:
        raise DimensionError("column", x.shape)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, j] = g[:, 0]
        return (out,)

    return _emit("column", (x,), x.data[:, j : j + 1].copy(), vjp)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    rows = {p.shape[:-1] for p in parts}
    if len(rows) != 1:
        raise DimensionError("concat_last", *(p.shape for p in parts))
    widths = np.cumsum([p.shape[-1] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, widths, axis=-1))

    return _emit("concat_last", parts, np.concatenate([p.data for p in parts], axis=-1), vjp)


def embedding(table: Tensor, idx) -> Tensor:
    """Rows of ``table`` selected by ``idx``; index ``-1`` yields a zero row."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    V = table.shape[0]
    if idx.ndim != 1:
        raise DimensionError("embedding", table.shape, idx.shape)
    if idx.size and (idx.max() >= V or idx.min() < -1):
        raise IndexError(f"embedding index out of range for vocabulary of {V}")
    pad = idx < 0
    safe = np.where(pad, 0, idx)
    out = table.data[safe].copy()
    out[pad] = 0.0
    tshape = table.shape

    def vjp(g):
        grad = np.zeros(tshape)
        keep = ~pad
        np.add.at(grad, safe[keep], g[keep])
        return (grad,)

    return _emit("embedding", (table,), out, vjp)


# ---------------------------------------------------------------- nonlinearities

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    X = x.data
    X2 = X * X
    th = np.tanh(_GELU_C * X * (1.0 + 0.044715 * X2))
    out = 0.5 * X * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * X2)
        return (g * (0.5 * (1.0 + th) + 0.5 * X * (1.0 - th * th) * dinner),)

    return _emit("gelu", (x,), out, vjp)


def _softmax(X: np.ndarray) -> np.ndarray:
    Z = X - X.max(axis=-1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError("softmax_rows", x.shape)
    P = _softmax(x.data)

    def vjp(g):
        return (P * (g - np.sum(g * P, axis=1, keepdims=True)),)

    return _emit("softmax_rows", (x,), P, vjp)


def log_sum_exp(y: Tensor) -> Tensor:
    """``ln sum exp(y)`` over a 1-D tensor, returned as a scalar tensor."""
    y = _as_tensor(y)
    if y.data.ndim != 1 or y.shape[0] < 1:
        raise DimensionError("log_sum_exp", y.shape)
    Y = y.data
    m = Y.max()
    val = m + math.log(np.exp(Y - m).sum())
    P = np.exp(Y - val)
    return _emit("log_sum_exp", (y,), np.array(val), lambda g: (g * P,))


def topk_renorm(p: Tensor, mask) -> Tensor:
    """Zero the unselected entries of each row of ``p`` and renormalize.

    ``mask`` is a constant 0/1 array; every row must select at least one entry.
    """
    p = _as_tensor(p)
    M = np.asarray(mask, dtype=np.float64)
    if M.shape != p.shape:
        raise DimensionError("topk_renorm", p.shape, M.shape)
    Q = p.data * M
    s = Q.sum(axis=1, keepdims=True)
    out = Q / s

    def vjp(g):
        return (M * (g - np.sum(g * out, axis=1, keepdims=True)) / s,)

    return _emit("topk_renorm", (p,), out, vjp)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", (x,), np.array(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    return _emit("mean", (x,), np.array(x.data.mean()), lambda g: (np.full(shape, float(g) / n),))


def mean_rows(x: Tensor) -> Tensor:
    """Column means of a 2-D tensor, shape (1, n)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError("mean_rows", x.shape)
    T = x.shape[0]
    return _emit(
        "mean_rows",
        (x,),
        x.data.mean(axis=0, keepdims=True),
        lambda g: (np.repeat(g / T, T, axis=0),),
    )


def dot_const(x: Tensor, c) -> Tensor:
    """Scalar ``sum(x * c)`` for a constant array ``c``."""
    x = _as_tensor(x)
    C = np.asarray(c, dtype=np.float64)
    if C.shape != x.shape:
        raise DimensionError("dot_const", x.shape, C.shape)
    return _emit("dot_const", (x,), np.array(np.sum(x.data * C)), lambda g: (g * C,))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy", logits.shape, targets.shape)
    T, V = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target out of range for vocabulary of {V}")
    X = logits.data
    m = X.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(X - m).sum(axis=1))
    rows = np.arange(T)
    val = np.mean(lse - X[rows, targets])

    def vjp(g):
        P = np.exp(X - lse[:, None])
        P[rows, targets] -= 1.0
        return (P * (float(g) / T),)

    return _emit("cross_entropy", (logits,), np.array(val), vjp)


# ---------------------------------------------------------------- reverse pass


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) back through ``tape``.

    Returns a gradient for every leaf registered on the tape, keyed by name;
    leaves the loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape or loss.node_id is None:
        raise ValueError("loss is not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(tape.nodes[loss.node_id].shape)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.vjp is None:
            continue
        for src, gin in zip(node.inputs, node.vjp(g)):
            if src is None or gin is None:
                continue
            if src in grads:
                grads[src] = grads[src] + gin
            else:
                grads[src] = gin
    out = {}
    for name, nid in tape.leaves.items():
        g = grads.get(nid)
        out[name] = np.zeros(tape.nodes[nid].shape) if g is None else np.asarray(g, dtype=np.float64).reshape(tape.nodes[nid].shape)
    return out


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a dict of tensors to a scalar tensor. The error per coordinate is
    ``|autodiff - fd| / max(1, |fd|)``. With ``max_coords`` set, at most that many
    coordinates per array are probed (chosen with ``rng``).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    tape = Tape()
    tensors = {k: tape.param(v, k) for k, v in params.items()}
    grads = backward(tape, f(tensors))
    rng = rng if rng is not None else np.random.default_rng(0)
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(f({k: Tensor(v) for k, v in work.items()}).data)
            flat[c] = orig - h
            fm = float(f({k: Tensor(v) for k, v in work.items()}).data)
            flat[c] = orig
            fd = (fp - fm) / (2 * h)
            ad = grads[name].reshape(-1)[c]
            worst = max(worst, abs(ad - fd) / max(1.0, abs(fd)))
    return worst
