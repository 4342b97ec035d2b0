"""Dense tensors with a reverse-mode tape.

Every public op computes its result with numpy, refuses non-finite output and,
when a :class:`Tape` is active and some input requires a gradient, appends the
result to the tape together with its vector-Jacobian closure.  A single reverse
sweep over the tape (in reverse recording order) accumulates gradients, so the
summation order is fixed and results are bit-reproducible.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class NumericalError(ArithmeticError):
    """Raised when an op produces NaN/Inf or is asked to normalize a zero vector."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar, all routed through the recorded ops
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Records ops while active; consumed by exactly one :meth:`backward` call."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def watch(self, name: str, array: np.ndarray) -> Tensor:
        """Leaf for a named parameter; repeated calls share one leaf."""
        leaf = self.leaves.get(name)
        if leaf is None:
            leaf = Tensor(array, requires_grad=True, name=name)
            self.leaves[name] = leaf
        return leaf

    def clear(self) -> None:
        self.nodes.clear()
        for leaf in self.leaves.values():
            leaf.grad = None
        self.consumed = False

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        if self.consumed:
            raise TapeError("tape already consumed")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True
        grads = {name: np.zeros_like(leaf.data) for name, leaf in self.leaves.items()}
        if not loss.requires_grad:
            return grads
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
            node.grad = None
        for name, leaf in self.leaves.items():
            if leaf.grad is not None:
                grads[name] = np.asarray(leaf.grad, dtype=leaf.data.dtype).reshape(leaf.shape)
                leaf.grad = None
        return grads


def backward(loss: Tensor, tape: Tape | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep on ``tape`` (default: the innermost active tape)."""
    tape = tape or active_tape()
    if tape is None:
        raise TapeError("no active tape")
    return tape.backward(loss)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"{op}: non-finite output")


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = vjp
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _broadcast_ok(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_ok(a, b, "add")
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_ok(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_ok(a, b, "mul")
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _record("square", a.data * a.data, (a,), lambda g: (2 * a.data * g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation, with its exact derivative."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1 + th)

    def vjp(g):
        dinner = c * (1 + 3 * k * x ** 2)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th ** 2) * dinner),)

    return _record("gelu", out, (a,), vjp)


# ---------------------------------------------------------------- reductions / shape

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    inv = np.argsort(axes)
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    key = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in key)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record("getitem", np.array(out), (a,), vjp)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _record("take_rows", out, (table,), vjp)


def concat_rows(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat_rows: {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat_rows", out, parts, vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _record("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, a.shape),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------- normalizations

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    if axis not in (-1, x.data.ndim - 1):
        raise ShapeError("layer_norm: only the last axis is supported")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} for input {x.shape}")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        gx = rstd / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                         - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _record("layer_norm", out, (x, gain, bias), vjp)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    # scale by the largest magnitude first so tiny inputs do not underflow when squared
    peak = np.abs(a.data).max(axis=axis, keepdims=True)
    if (peak == 0).any():
        raise NumericalError("l2_normalize: zero-norm input")
    scaled = a.data / peak
    unit = np.sqrt((scaled * scaled).sum(axis=axis, keepdims=True))
    norm = peak * unit
    out = scaled / unit

    def vjp(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _record("l2_normalize", out, (a,), vjp)


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy; ``logits`` is [K] with an int label or [N, K] with N labels."""
    labels = np.asarray(labels, dtype=np.int64)
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    lab = labels.reshape(-1)
    if z.ndim != 2 or lab.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= z.shape[1]):
        raise ValueError(f"cross_entropy: label out of range [0, {z.shape[1]})")
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    logp = z - lse
    n = z.shape[0]
    rows = np.arange(n)
    out = -logp[rows, lab].sum() / n

    def vjp(g):
        p = np.exp(logp)
        p[rows, lab] -= 1
        grad = p * (g / n)
        return (grad[0] if single else grad,)

    return _record("cross_entropy", np.asarray(out, dtype=logits.dtype), (logits,), vjp)


_KINDS = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "gelu": gelu,
    "l2_normalize": l2_normalize,
    "concat_rows": lambda *parts, axis=0: concat_rows(parts, axis=axis),
    "cross_entropy": cross_entropy,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one primitive by name (the tape records it like a direct call)."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(_KINDS)}") from None
    return fn(*inputs, **kwargs)


def custom_op(name: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Record a fused op whose ``vjp(g)`` returns one gradient per parent."""
    return _record(name, np.asarray(data), parents, vjp)
