"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every operation whose inputs require a gradient.
Tensors created without a tape are constants: operations on them run eagerly
and nothing is recorded.

    tape = Tape()
    x = tape.param("x", np.array([1.0, 2.0]))
    y = (x * x).sum()
    tape.param_grads(y)["x"]   # -> array([2., 4.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray
VJP = Callable[[Array], Sequence[Optional[Array]]]


class Tensor:
    """Immutable float64 array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100.0

    def __init__(self, data, tape: Optional["Tape"] = None, node_id: Optional[int] = None,
                 copy: bool = True):
        arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64).view()
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; implementations live in the op functions below
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    kind: str
    parents: tuple  # node ids (or None for constants), aligned with the vjp outputs
    vjp: Optional[VJP]
    signature: Optional[Array] = None  # branch pattern of piecewise ops
    kink_margin: float = float("inf")


@dataclass
class Tape:
    """Append-only record of operations plus a registry of named parameters."""

    checked: bool = False
    nodes: list = field(default_factory=list)
    parameters: dict = field(default_factory=dict)

    def leaf(self, value, name: Optional[str] = None) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), None))
        t = Tensor(value, self, node_id)
        if name is not None:
            if name in self.parameters:
                raise KeyError(f"parameter {name!r} already registered")
            self.parameters[name] = t
        return t

    def param(self, name: str, value) -> Tensor:
        return self.leaf(value, name)

    def params(self, values: dict) -> dict:
        return {k: self.param(k, v) for k, v in values.items()}

    def _record(self, kind, data, parents, vjp, signature=None, kink_margin=float("inf")) -> Tensor:
        if self.checked and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite output from op {kind!r} (node {len(self.nodes)})")
        node_id = len(self.nodes)
        ids = tuple(p.node_id if isinstance(p, Tensor) and p.tape is self else None for p in parents)
        self.nodes.append(Node(kind, ids, vjp, signature, kink_margin))
        return Tensor(data, self, node_id, copy=False)

    def backward(self, root: Tensor) -> dict:
        """Return ``{node_id: Tensor}`` gradients of scalar ``root``.

        Every registered parameter gets an entry, zero if unreachable.
        The tape is not modified, so this may be called repeatedly.
        """
        if not isinstance(root, Tensor) or root.tape is not self or root.node_id is None:
            raise ValueError("root is not recorded on this tape")
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, Array] = {root.node_id: np.ones_like(root.data)}
        for nid in range(root.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            if not g.flags.c_contiguous:
                g = np.ascontiguousarray(g)
            for pid, pg in zip(node.parents, node.vjp(g)):
                if pid is None or pg is None:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg
        out = {}
        for t in self.parameters.values():
            g = grads.get(t.node_id)
            out[t.node_id] = Tensor(np.zeros(t.shape) if g is None else np.reshape(g, t.shape))
        for nid, g in grads.items():
            if nid not in out:
                out[nid] = Tensor(g)
        return out

    def param_grads(self, root: Tensor) -> dict:
        """Gradients keyed by parameter name, as plain arrays."""
        gm = self.backward(root)
        return {name: gm[t.node_id].data for name, t in self.parameters.items()}

    def signatures(self) -> list:
        return [n.signature for n in self.nodes]

    def min_kink_margin(self) -> float:
        return min((n.kink_margin for n in self.nodes), default=float("inf"))


# ---------------------------------------------------------------- plumbing

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts) -> Optional[Tape]:
    tape = None
    for t in ts:
        if isinstance(t, Tensor) and t.tape is not None and t.node_id is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def make(kind: str, data: Array, parents: Sequence, vjp: VJP, signature=None, kink_margin=float("inf")) -> Tensor:
    """Wrap an op result, recording it when any parent is on a tape."""
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data, copy=False)
    return tape._record(kind, data, tuple(parents), vjp, signature, kink_margin)


def unbroadcast(g: Array, shape: tuple) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make("mul", ad * bd, (a, b),
                lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make("div", out, (a, b),
                lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    pos = ad > 0
    margin = float(np.min(np.abs(ad))) if ad.size else float("inf")
    return make("relu", np.where(pos, ad, 0.0), (a,), lambda g: (g * pos,), signature=pos, kink_margin=margin)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    sgn = np.sign(ad)
    margin = float(np.min(np.abs(ad))) if ad.size else float("inf")
    return make("abs", np.abs(ad), (a,), lambda g: (g * sgn,), signature=sgn > 0, kink_margin=margin)


def pow_abs(a, p: float) -> Tensor:
    """``|a| ** p``; smooth at zero for ``p > 1``."""
    a = as_tensor(a)
    ad = a.data
    mag = np.abs(ad)
    out = mag ** p
    sgn = np.sign(ad)

    def vjp(g):
        if p == 1.0:
            return (g * sgn,)
        return (g * p * mag ** (p - 1.0) * sgn,)

    if p > 1.0:
        return make("pow_abs", out, (a,), vjp)
    margin = float(np.min(mag)) if ad.size else float("inf")
    return make("pow_abs", out, (a,), vjp, signature=sgn > 0, kink_margin=margin)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    inside = (ad > lo) & (ad < hi)
    margin = float(min(np.min(np.abs(ad - lo)), np.min(np.abs(ad - hi)))) if ad.size else float("inf")
    return make("clamp", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), signature=inside, kink_margin=margin)


# ---------------------------------------------------------------- reductions / shape

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return make("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return make("index", a.data[idx], (a,), vjp)


def concat(ts: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make("concat", np.concatenate([t.data for t in ts], axis=axis), ts,
                lambda g: tuple(np.split(g, sizes, axis=axis)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make("softmax", out, (a,), vjp)


def stack_scalars(ts: Sequence) -> Tensor:
    return concat([reshape(as_tensor(t), (1,)) for t in ts], axis=0)
