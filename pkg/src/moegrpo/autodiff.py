"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations the MoE classifier and its training losses need are
provided. Broadcasting is deliberately narrow: elementwise binary ops accept
equal shapes or a 0-d scalar operand; bias-style addition over trailing
dimensions goes through :func:`add_bias`.

Every op that touches a tensor with ``requires_grad`` records a node carrying a
global sequence number. ``Tensor.backward`` gathers the reachable nodes, orders
them by decreasing sequence number (the tape, replayed in reverse execution
order) and visits each exactly once. The graph is released afterwards, so a
second ``backward`` on the same output raises instead of silently
double-counting.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError


_sequence = itertools.count()


class _Node:
    __slots__ = ("seq", "parents", "backward")

    def __init__(self, parents: tuple, backward: Callable):
        self.seq = next(_sequence)
        self.parents = parents
        self.backward = backward


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_released")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self._released = False

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def detach(self) -> "Tensor":
        """Copy of the values, cut off from the tape."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- backward ---------------------------------------------------------

    def backward(self, grad=None):
        if not self.requires_grad:
            return
        if self._released:
            raise RuntimeError(
                "backward called twice on the same graph; re-run the forward pass first"
            )
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if seed.shape != self.shape:
            raise ShapeError(f"seed gradient shape {seed.shape} != output shape {self.shape}")
        if self._node is None:
            _accumulate_leaf(self, seed)
            return

        tape = _build_tape(self)
        pending = {id(self): seed}
        for tensor in tape:
            g = pending.pop(id(tensor), None)
            if g is None:
                continue
            node = tensor._node
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    _accumulate_leaf(parent, pg)
                elif id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg
        for tensor in tape:
            tensor._node = None
            tensor._released = True

    # -- operator sugar ---------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _build_tape(root: Tensor) -> list:
    seen = set()
    tape = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        tape.append(t)
        stack.extend(p for p in t._node.parents if p.requires_grad)
    tape.sort(key=lambda t: t._node.seq, reverse=True)
    return tape


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._released = False
    out.requires_grad = any(p.requires_grad for p in parents)
    out._node = _Node(parents, backward) if out.requires_grad else None
    return out


def _check_finite(x: np.ndarray, op: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


# -- elementwise binary ----------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.ndim == 0 and g.ndim > 0:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out, (a, b), lambda g: (_reduce_to(g / bd, a), _reduce_to(-g * out / bd, b))
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def minimum(a, b) -> Tensor:
    """Elementwise min; the gradient goes to the smaller argument, ties to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "minimum")
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _result(
        out,
        (a, b),
        lambda g: (_reduce_to(np.where(pick_a, g, 0.0), a), _reduce_to(np.where(pick_a, 0.0, g), b)),
    )


# -- elementwise unary -----------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: nonpositive input")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient 1 on the closed interval and 0 outside it."""
    a = as_tensor(a)
    if lo > hi:
        raise ValueError(f"clip: lo={lo} > hi={hi}")
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions and shape ops ---------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward)


def add_bias(x, b) -> Tensor:
    """``x + b`` where ``b.shape`` equals the trailing dimensions of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not trail {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def feature_embed(x, scale) -> Tensor:
    """Token per feature: ``out[n, i, :] = x[n, i] * scale[i, :]``."""
    x, scale = as_tensor(x), as_tensor(scale)
    if x.ndim != 2 or scale.ndim != 2 or x.shape[1] != scale.shape[0]:
        raise ShapeError(f"feature_embed: x {x.shape} vs scale {scale.shape}")
    xd, sd = x.data, scale.data
    out = xd[:, :, None] * sd[None, :, :]
    return _result(
        out, (x, scale), lambda g: ((g * sd[None]).sum(axis=2), (g * xd[:, :, None]).sum(axis=0))
    )


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
    if ok and b.ndim > 2:
        ok = a.shape[:-2] == b.shape[:-2]
    if not ok:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


# -- normalisation and probabilities --------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then ``* gain + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), backward)


def gather(logp, actions) -> Tensor:
    """Pick ``logp[n, actions[n, ...]]`` per row; backward scatter-adds duplicates."""
    logp = as_tensor(logp)
    idx = np.asarray(actions.data if isinstance(actions, Tensor) else actions)
    if logp.ndim != 2 or idx.ndim not in (1, 2) or idx.shape[0] != logp.shape[0]:
        raise ShapeError(f"gather: logp {logp.shape} vs actions {idx.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        if not np.all(idx == np.round(idx)):
            raise IndexError("gather: non-integer action index")
        idx = idx.astype(np.int64)
    n_classes = logp.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n_classes):
        raise IndexError(f"gather: action index out of range [0, {n_classes})")
    rows = np.arange(logp.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    rows = np.broadcast_to(rows, idx.shape)

    def backward(g):
        out = np.zeros(logp.shape)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return _result(logp.data[rows, idx], (logp,), backward)


gather_log_prob = gather
