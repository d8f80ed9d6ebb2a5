"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds a :class:`Node` holding its inputs and a closure mapping the
output gradient to input gradients. ``Tensor.backward`` linearises the graph
into a :class:`Tape` (topological order) and walks it once in reverse.

A graph can be differentiated only once: the tape releases its closures after
the reverse sweep and a second ``backward`` on the same output raises
``RuntimeError``. Re-run the forward pass to get fresh gradients.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateBatchError(ValueError):
    """Raised when a loss has no supervised positions."""


class Node:
    __slots__ = ("inputs", "backward_fn", "released")

    def __init__(self, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.released = False


class Tensor:
    """Dense float array that optionally participates in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(DTYPE, copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data, dtype=DTYPE)
        tape = Tape.from_output(self)
        tape.backward(self, grad)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=DTYPE), like.shape))


class Tape:
    """Topologically ordered record of the nodes reachable from one output."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                if t.node.released:
                    raise RuntimeError(
                        "graph already differentiated; re-run the forward pass before backward()"
                    )
                for inp in t.node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    def backward(self, out: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=DTYPE)}
        for t in reversed(self.tensors):
            g = grads.pop(id(t), None)
            if t.node is None:
                if g is not None and t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            node = t.node
            if g is not None:
                in_grads = node.backward_fn(g)
                for inp, ig in zip(node.inputs, in_grads):
                    if ig is None or not inp.requires_grad:
                        continue
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
            node.backward_fn = None
            node.released = True


class no_grad:
    """Context manager that stops ops from recording graph nodes."""

    _depth = 0

    def __enter__(self):
        no_grad._depth += 1
        return self

    def __exit__(self, *exc):
        no_grad._depth -= 1
        return False


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if not no_grad._depth and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(tuple(inputs), backward_fn)
    return out


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also match the trailing axes of ``a`` (bias add)."""
    _check_trailing(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, _sum_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may match the trailing axes of ``a`` (gain)."""
    _check_trailing(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, _sum_to(g * ad, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    k = math.sqrt(2.0 / math.pi)
    x2 = xd * xd
    th = np.tanh(k * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = k * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``. ``b`` is either a ``[k, n]`` weight shared across
    the leading axes of ``a`` or ``[..., k, n]`` with the same leading axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # one GEMM over all leading rows instead of a stack of small ones
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def bw(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

    else:
        out = ad @ bd

        def bw(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(out, (a, b), bw)


# ---------------------------------------------------------------- shape ops


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(src),))


def slice_(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing with a scatter backward."""
    src = x.shape

    def bw(g):
        full = np.zeros(src, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _result(x.data[index], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other axes must agree."""
    xs = list(xs)
    if not xs:
        raise DimensionError("concat: empty input list")
    ref = xs[0].shape
    axis = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(g[tuple(idx)])
        return tuple(out)

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


# ---------------------------------------------------------------- reductions


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"axis {axis} out of range for rank-{x.ndim} tensor")
    return axis % x.ndim


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    src = x.shape
    return _result(
        x.data.mean(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), src).copy(),),
    )


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Max reduction; ties route the gradient to the first maximal entry."""
    axis = _check_axis(x, axis)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    src = x.shape

    def bw(g):
        full = np.zeros(src, dtype=DTYPE)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(np.take_along_axis(x.data, idx, axis=axis).squeeze(axis), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(src, float(g)),))


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: feature size {d} vs gain {gain.shape} bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data

    def bw(g):
        gx = g * gd
        gxin = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                       - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, d)
        return gxin, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0)

    return _result(xhat * gd + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------- lookups and losses


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` ``[V, D]`` selected by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v})")
    src = table.shape

    def bw(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw)


def cross_entropy_with_logits(logits: Tensor, targets, mask) -> Tensor:
    """Masked next-token cross-entropy.

    For ``[T, V]`` logits: mean of ``-log softmax(logits_t)[target_t]`` over the
    positions where ``mask`` is true. For ``[B, T, V]`` logits each row is
    reduced that way first and the result is the mean over rows.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    ld = logits.data
    if ld.ndim not in (2, 3) or targets.shape != ld.shape[:-1] or mask.shape != targets.shape:
        raise DimensionError(
            f"cross_entropy: logits {ld.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    v = ld.shape[-1]
    sel = targets[mask]
    if sel.size and (sel.min() < 0 or sel.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    if ld.ndim == 2:
        counts = np.array([mask.sum()])
        weights = mask / max(int(counts[0]), 1)
    else:
        counts = mask.sum(axis=1)
        weights = mask / np.maximum(counts, 1)[:, None] / ld.shape[0]
    if (counts == 0).any():
        raise DegenerateBatchError("cross_entropy: a sequence has no supervised positions")

    z = ld - ld.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * weights).sum()

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return ((p - onehot) * (weights * float(g))[..., None],)

    return _result(np.asarray(loss), (logits,), bw)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
