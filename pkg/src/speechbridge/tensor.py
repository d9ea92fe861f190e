"""Dense tensors with tape-based reverse-mode differentiation.

Double precision by default so finite-difference checks stay tight;
single precision is opt-in per tensor. Broadcasting is deliberately
limited to bias-style trailing-dimension broadcast.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GradientError(RuntimeError):
    """Backward called in an unsupported configuration."""


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    DEFAULT_DTYPE = dtype


class Tensor:
    """N-d array plus an optional gradient buffer.

    `requires_grad=False` marks the tensor frozen: it never receives
    gradient accumulation and carries no grad buffer. Data is treated
    as immutable once wrapped; only `grad` mutates.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node = None  # set when produced by a recorded op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def freeze(self) -> "Tensor":
        """Drop the grad buffer and stop all future accumulation."""
        self.requires_grad = False
        self.grad = None
        return self

    def unfreeze(self) -> "Tensor":
        self.requires_grad = True
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._node is not None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple
    vjps: tuple  # per-input callables g -> ndarray, or None when not needed


class Tape:
    """Execution-ordered record of differentiable operations.

    Replayed once, in reverse, by `backward`. One tape per process;
    concurrent backward on the same tape is not supported.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (e.g. for decoding)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _record(out: Tensor, inputs: tuple, vjps: tuple) -> Tensor:
    if _GRAD_ENABLED and any(t.tracked for t in inputs):
        pruned = tuple(v if t.tracked else None for t, v in zip(inputs, vjps))
        node = _Node(out, inputs, pruned)
        out._node = node
        _TAPE.record(node)
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every reachable requires_grad tensor.

    Walks the active tape in reverse, visiting each recorded operation
    exactly once, then clears the tape. Frozen tensors are untouched.
    """
    if loss.data.ndim != 0:
        raise GradientError(
            f"backward expects a scalar loss, got shape {tuple(loss.shape)}"
        )
    if loss._node is None and not loss.requires_grad:
        _TAPE.clear()
        return
    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_TAPE.nodes):
        g = flowing.pop(id(node.output), None)
        if g is None:
            continue
        for inp, vjp in zip(node.inputs, node.vjps):
            if vjp is None:
                continue
            gi = vjp(g)
            if inp._node is not None:
                key = id(inp)
                if key in flowing:
                    flowing[key] = flowing[key] + gi
                else:
                    flowing[key] = gi
            elif inp.requires_grad:
                if inp.grad is None:  # requires_grad flipped on by hand
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
    if loss.requires_grad and loss._node is None:
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += flowing.get(id(loss), 0.0)
    _TAPE.clear()


def zero_grads(params) -> None:
    """Zero every grad buffer in an iterable or name->Tensor mapping."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.zero_grad()


# ---------------------------------------------------------------------------
# broadcast helpers (bias-style: equal shapes, scalar, or trailing suffix)


def _is_suffix(small, big) -> bool:
    n = len(small)
    return n <= len(big) and tuple(big[len(big) - n:]) == tuple(small)


def _check_elementwise(a: Tensor, b: Tensor, opname: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or _is_suffix(sb, sa) or _is_suffix(sa, sb):
        return
    raise ShapeError(
        f"{opname}: shapes {tuple(sa)} and {tuple(sb)} are neither equal nor "
        "bias-style trailing-broadcastable"
    )


def _reduce_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes introduced by trailing-dimension broadcast."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(
        out,
        (a, b),
        (
            lambda g: _reduce_to_shape(g, a.shape),
            lambda g: _reduce_to_shape(g, b.shape),
        ),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        (
            lambda g: _reduce_to_shape(g * b.data, a.shape),
            lambda g: _reduce_to_shape(g * a.data, b.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), (lambda g: g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched over identical leading dims or a 2-d operand."""
    sa, sb = a.shape, b.shape
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {tuple(sa)} x {tuple(sb)}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {tuple(sa)} x {tuple(sb)}")
    if a.data.ndim != 2 and b.data.ndim != 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul: batch dimensions disagree, {tuple(sa)} x {tuple(sb)}")
    out = Tensor(np.matmul(a.data, b.data))

    def grad_a(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        return _reduce_to_shape(ga, sa)

    def grad_b(g):
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if gb.ndim > len(sb):  # 2-d b against batched a: sum over batch
            gb = gb.sum(axis=tuple(range(gb.ndim - len(sb))))
        return gb

    return _record(out, (a, b), (grad_a, grad_b))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {tuple(a.shape)}")
    out = Tensor(np.swapaxes(a.data, -1, -2))
    return _record(out, (a,), (lambda g: np.swapaxes(g, -1, -2),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,), (lambda g: g * mask,))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias broadcast over leading dimensions."""
    return add(matmul(x, w), b)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must be shape ({d},), got "
            f"{tuple(gain.shape)} / {tuple(bias.shape)}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def grad_x(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    def grad_gain(g):
        return _reduce_to_shape(g * xhat, gain.shape)

    def grad_bias(g):
        return _reduce_to_shape(g, bias.shape)

    return _record(out, (x, gain, bias), (grad_x, grad_gain, grad_bias))


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by integer id array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: ids outside [0, {table.shape[0]}) "
            f"(min {ids.min()}, max {ids.max()})"
        )
    out = Tensor(table.data[ids])

    def grad_table(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return gt

    return _record(out, (table,), (grad_table,))


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along `axis`; used on the time and feature axes."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        other[axis] = base[axis]
        if other != base:
            raise ShapeError(
                f"concat: incompatible shapes {[tuple(t.shape) for t in tensors]} "
                f"on axis {axis}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _record(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of bounds for axis {axis} "
            f"of shape {tuple(x.shape)}"
        )
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return gx

    return _record(out, (x,), (vjp,))


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), (lambda g: g.reshape(x.shape),))


def pad_rows(x: Tensor, rows: int) -> Tensor:
    """Append zero rows to a 2-d tensor until it has `rows` rows."""
    if x.data.ndim != 2:
        raise ShapeError(f"pad_rows expects a 2-d tensor, got {tuple(x.shape)}")
    n = x.shape[0]
    if rows < n:
        raise ShapeError(f"pad_rows: target {rows} < current {n}")
    if rows == n:
        return reshape(x, x.shape)  # keep a node so callers may stack uniformly
    padded = np.zeros((rows, x.shape[1]), dtype=x.data.dtype)
    padded[:n] = x.data
    out = Tensor(padded)
    return _record(out, (x,), (lambda g: g[:n],))


def stack(tensors) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ: {sorted(shapes)}")
    out = Tensor(np.stack([t.data for t in tensors]))

    def make_vjp(i):
        return lambda g: g[i]

    return _record(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def softmax_rows(x: Tensor, additive_mask=None) -> Tensor:
    """Row-wise softmax over the last axis, with an optional additive mask.

    The mask is a plain ndarray of 0 / large-negative entries and is not
    differentiated through.
    """
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return p * (g - dot)

    return _record(out, (x,), (vjp,))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return _record(out, (x,), (lambda g: np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean())
    return _record(out, (x,), (lambda g: np.broadcast_to(g / n, x.shape).copy(),))


@dataclass
class CrossEntropyResult:
    """Masked cross-entropy loss plus the mask bookkeeping callers need."""

    loss: Tensor
    supervised: int  # positions contributing to the mean

    @property
    def all_ignored(self) -> bool:
        return self.supervised == 0


def softmax_cross_entropy(logits: Tensor, targets, ignore_id: int) -> CrossEntropyResult:
    """Mean negative log-softmax over positions whose target != ignore_id.

    Ignored positions contribute nothing to the value or the gradient.
    With every position ignored the loss is 0 with zero gradient, which
    the caller can detect via `all_ignored`.
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tgt = targets.reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(
            f"cross_entropy: {flat.shape[0]} logit rows vs {tgt.shape[0]} targets"
        )
    valid = tgt != ignore_id
    if valid.any() and (tgt[valid].min() < 0 or tgt[valid].max() >= vocab):
        raise ShapeError(f"cross_entropy: target id outside [0, {vocab})")
    count = int(valid.sum())

    z = flat - flat.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1)) + flat.max(axis=-1)
    safe_tgt = np.where(valid, tgt, 0)
    nll = logsumexp - flat[np.arange(flat.shape[0]), safe_tgt]
    value = nll[valid].mean() if count else 0.0
    out = Tensor(np.asarray(value, dtype=logits.data.dtype))

    def vjp(g):
        if count == 0:
            return np.zeros_like(logits.data)
        p = np.exp(flat - logsumexp[:, None])
        p[np.arange(flat.shape[0]), safe_tgt] -= 1.0
        p *= (valid / count)[:, None]
        return (g * p).reshape(logits.shape)

    loss = _record(out, (logits,), (vjp,))
    return CrossEntropyResult(loss=loss, supervised=count)
