"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Operations are recorded eagerly (define-by-run).  Every node keeps a reference
to the primitive that produced it, so a recorded graph can be packed into a
:class:`Tape` and replayed later against new leaf bindings.

    >>> x = Tensor(3.0, name="x", requires_grad=True)
    >>> y = x * x
    >>> float(y), float(gradients(y, [x])["x"])
    (9.0, 6.0)
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NumericError",
    "Tensor",
    "Tape",
    "as_tensor",
    "forward",
    "backward",
    "gradients",
    "value_and_grad",
    "grad_check",
    "matmul",
    "exp",
    "log",
    "softplus",
    "log_sigmoid",
    "sigmoid",
    "tanh",
    "relu",
    "square",
    "sqrt",
    "clamp",
    "mask_multiply",
    "concatenate",
    "reshape",
    "broadcast_to",
    "transpose",
    "tensor_sum",
    "tensor_mean",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NumericError(AutodiffError, FloatingPointError):
    pass


_counter = itertools.count()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


class Primitive:
    """One differentiable operation: ``forward`` on values, ``vjp`` for cotangents."""

    name = "primitive"

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, g: np.ndarray, out: np.ndarray, *xs: np.ndarray) -> tuple:
        raise NotImplementedError

    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        pass

    def __repr__(self) -> str:
        return self.name


class _Broadcasting(Primitive):
    def check_shapes(self, *shapes):
        try:
            np.broadcast_shapes(*shapes)
        except ValueError:
            raise ShapeError(f"{self.name}: cannot broadcast shapes {shapes}") from None


class Add(_Broadcasting):
    name = "add"

    def forward(self, a, b):
        return a + b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(_Broadcasting):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class Mul(_Broadcasting):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Div(_Broadcasting):
    name = "div"

    def forward(self, a, b):
        return a / b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


class Neg(Primitive):
    name = "neg"

    def forward(self, a):
        return -a

    def vjp(self, g, out, a):
        return (-g,)


class MatMul(Primitive):
    name = "matmul"

    def check_shapes(self, sa, sb):
        if len(sa) < 1 or len(sb) < 1 or sa[-1] != sb[-2 if len(sb) > 1 else 0]:
            raise ShapeError(f"matmul: incompatible shapes {sa} @ {sb}")

    def forward(self, a, b):
        return a @ b

    def vjp(self, g, out, a, b):
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        g2 = g.reshape(np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2]) + (a2.shape[-2], b2.shape[-1]))
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        return _unbroadcast(ga, a2.shape).reshape(a.shape), _unbroadcast(gb, b2.shape).reshape(b.shape)


class Exp(Primitive):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def vjp(self, g, out, a):
        return (g * out,)


class Log(Primitive):
    name = "log"

    def forward(self, a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    def vjp(self, g, out, a):
        return (g / a,)


class Softplus(Primitive):
    name = "softplus"

    def forward(self, a):
        return _softplus(a)

    def vjp(self, g, out, a):
        return (g * _sigmoid(a),)


class LogSigmoid(Primitive):
    name = "log_sigmoid"

    def forward(self, a):
        return -_softplus(-a)

    def vjp(self, g, out, a):
        return (g * _sigmoid(-a),)


class Sigmoid(Primitive):
    name = "sigmoid"

    def forward(self, a):
        return _sigmoid(a)

    def vjp(self, g, out, a):
        return (g * out * (1.0 - out),)


class Tanh(Primitive):
    name = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def vjp(self, g, out, a):
        return (g * (1.0 - out * out),)


class Relu(Primitive):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def vjp(self, g, out, a):
        return (g * (a > 0),)


class Square(Primitive):
    name = "square"

    def forward(self, a):
        return a * a

    def vjp(self, g, out, a):
        return (2.0 * g * a,)


class Sqrt(Primitive):
    name = "sqrt"

    def forward(self, a):
        with np.errstate(invalid="ignore"):
            return np.sqrt(a)

    def vjp(self, g, out, a):
        return (g * 0.5 / out,)


class Clamp(Primitive):
    name = "clamp"

    def __init__(self, lo: float, hi: float):
        self.lo, self.hi = lo, hi

    def forward(self, a):
        return np.clip(a, self.lo, self.hi)

    def vjp(self, g, out, a):
        # identity inside, zero outside; the boundary itself passes gradient
        return (g * ((a >= self.lo) & (a <= self.hi)),)


class MaskMultiply(Primitive):
    """Elementwise product with a constant 0/1 mask held by the primitive."""

    name = "mask_multiply"

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=np.float64)

    def check_shapes(self, sa):
        if sa != self.mask.shape:
            raise ShapeError(f"mask_multiply: operand {sa} vs mask {self.mask.shape}")

    def forward(self, a):
        return a * self.mask

    def vjp(self, g, out, a):
        return (g * self.mask,)


class Sum(Primitive):
    name = "sum"

    def __init__(self, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims

    def forward(self, a):
        return np.asarray(a.sum(axis=self.axis, keepdims=self.keepdims))

    def vjp(self, g, out, a):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, a.shape).copy(),)


class Mean(Primitive):
    name = "mean"

    def __init__(self, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims

    def forward(self, a):
        return np.asarray(a.mean(axis=self.axis, keepdims=self.keepdims))

    def vjp(self, g, out, a):
        n = a.size // max(out.size, 1) if a.size else 1
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, a.shape) / n,)


class Reshape(Primitive):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def check_shapes(self, sa):
        try:
            np.empty(sa).reshape(self.shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {sa} to {self.shape}") from None

    def forward(self, a):
        return a.reshape(self.shape)

    def vjp(self, g, out, a):
        return (g.reshape(a.shape),)


class BroadcastTo(Primitive):
    name = "broadcast"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def check_shapes(self, sa):
        try:
            np.broadcast_shapes(sa, self.shape)
        except ValueError:
            raise ShapeError(f"broadcast: cannot broadcast {sa} to {self.shape}") from None

    def forward(self, a):
        return np.broadcast_to(a, self.shape).copy()

    def vjp(self, g, out, a):
        return (_unbroadcast(g, a.shape),)


class Transpose(Primitive):
    name = "transpose"

    def __init__(self, axes=None):
        self.axes = axes

    def forward(self, a):
        return np.transpose(a, self.axes)

    def vjp(self, g, out, a):
        if self.axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(self.axes)),)


class Slice(Primitive):
    name = "slice"

    def __init__(self, index):
        self.index = index

    def forward(self, a):
        return np.array(a[self.index], dtype=np.float64)

    def vjp(self, g, out, a):
        ga = np.zeros_like(a)
        np.add.at(ga, self.index, g)
        return (ga,)


class Concatenate(Primitive):
    name = "concatenate"

    def __init__(self, axis=-1):
        self.axis = axis

    def check_shapes(self, *shapes):
        nd = {len(s) for s in shapes}
        if len(nd) != 1:
            raise ShapeError(f"concatenate: rank mismatch {shapes}")
        ax = self.axis % len(shapes[0])
        rest = {s[:ax] + s[ax + 1:] for s in shapes}
        if len(rest) != 1:
            raise ShapeError(f"concatenate: shapes {shapes} differ off axis {self.axis}")

    def forward(self, *xs):
        return np.concatenate(xs, axis=self.axis)

    def vjp(self, g, out, *xs):
        bounds = np.cumsum([x.shape[self.axis] for x in xs])[:-1]
        return tuple(np.split(g, bounds, axis=self.axis))


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------


class Tensor:
    """A float64 array that remembers how it was computed."""

    __array_ufunc__ = None
    __slots__ = ("data", "requires_grad", "name", "op", "parents", "uid")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"leaf {name or '<const>'} holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op: Primitive | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.uid = next(_counter)

    @classmethod
    def _from_op(cls, op: Primitive, parents: Sequence["Tensor"], data: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = data
        t.requires_grad = any(p.requires_grad for p in parents)
        t.name = None
        t.op = op if t.requires_grad else None
        t.parents = tuple(parents) if t.requires_grad else ()
        t.uid = next(_counter)
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, op={self.op})"

    def __add__(self, other):
        return apply(Add(), self, other)

    def __radd__(self, other):
        return apply(Add(), other, self)

    def __sub__(self, other):
        return apply(Sub(), self, other)

    def __rsub__(self, other):
        return apply(Sub(), other, self)

    def __mul__(self, other):
        return apply(Mul(), self, other)

    def __rmul__(self, other):
        return apply(Mul(), other, self)

    def __truediv__(self, other):
        return apply(Div(), self, other)

    def __rtruediv__(self, other):
        return apply(Div(), other, self)

    def __neg__(self):
        return apply(Neg(), self)

    def __matmul__(self, other):
        return apply(MatMul(), self, other)

    def __rmatmul__(self, other):
        return apply(MatMul(), other, self)

    def __getitem__(self, index):
        return apply(Slice(index), self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(op: Primitive, *args) -> Tensor:
    parents = [as_tensor(a) for a in args]
    op.check_shapes(*(p.shape for p in parents))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = np.asarray(op.forward(*(p.data for p in parents)), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite output from {op.name} node")
    return Tensor._from_op(op, parents, out)


def matmul(a, b) -> Tensor:
    return apply(MatMul(), a, b)


def exp(a) -> Tensor:
    return apply(Exp(), a)


def log(a) -> Tensor:
    return apply(Log(), a)


def softplus(a) -> Tensor:
    return apply(Softplus(), a)


def log_sigmoid(a) -> Tensor:
    return apply(LogSigmoid(), a)


def sigmoid(a) -> Tensor:
    return apply(Sigmoid(), a)


def tanh(a) -> Tensor:
    return apply(Tanh(), a)


def relu(a) -> Tensor:
    return apply(Relu(), a)


def square(a) -> Tensor:
    return apply(Square(), a)


def sqrt(a) -> Tensor:
    return apply(Sqrt(), a)


def clamp(a, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    return apply(Clamp(lo, hi), a)


def mask_multiply(a, mask) -> Tensor:
    return apply(MaskMultiply(mask), a)


def concatenate(xs: Sequence, axis: int = -1) -> Tensor:
    return apply(Concatenate(axis), *xs)


def reshape(a, shape) -> Tensor:
    return apply(Reshape(shape), a)


def broadcast_to(a, shape) -> Tensor:
    return apply(BroadcastTo(shape), a)


def transpose(a, axes=None) -> Tensor:
    return apply(Transpose(axes), a)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    return apply(Sum(axis, keepdims), a)


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    return apply(Mean(axis, keepdims), a)


# ---------------------------------------------------------------------------
# tape and reverse accumulation
# ---------------------------------------------------------------------------


def _toposort(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.uid in seen:
            continue
        seen.add(node.uid)
        stack.append((node, True))
        for p in node.parents:
            if p.uid not in seen:
                stack.append((p, False))
    return order


class Tape:
    """A recorded computation, topologically ordered from leaves to ``output``.

    Named leaves are the free inputs; they can be rebound with :func:`forward`.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = _toposort(output)
        self.leaves = {n.name: n for n in self.nodes if n.op is None and n.name is not None}

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def record(cls, fn: Callable[..., Tensor], bindings: Mapping[str, np.ndarray]) -> "Tape":
        leaves = {k: Tensor(v, name=k, requires_grad=True) for k, v in bindings.items()}
        return cls(fn(**leaves))


def forward(tape: Tape, bindings: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Replay ``tape`` with new leaf values and return the rebound graph.

    The result maps every named leaf plus ``"output"`` to its freshly
    computed tensor; the returned output can be fed to :func:`backward`.
    """
    missing = set(tape.leaves) - set(bindings)
    if missing:
        raise AutodiffError(f"unbound tape inputs: {sorted(missing)}")
    fresh: dict[int, Tensor] = {}
    for node in tape.nodes:
        if node.op is None:
            if node.name in bindings:
                value = np.asarray(bindings[node.name], dtype=np.float64)
                if value.shape != node.shape:
                    raise ShapeError(f"binding {node.name}: shape {value.shape} != recorded {node.shape}")
                fresh[node.uid] = Tensor(value, name=node.name, requires_grad=node.requires_grad)
            else:
                fresh[node.uid] = node
            continue
        parents = [fresh[p.uid] for p in node.parents]
        try:
            fresh[node.uid] = apply(node.op, *parents)
        except ShapeError as exc:
            raise ShapeError(f"node #{tape.nodes.index(node)} ({node.op.name}): {exc}") from None
    result = {name: fresh[leaf.uid] for name, leaf in tape.leaves.items()}
    result["output"] = fresh[tape.output.uid]
    return result


def backward(output: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse accumulation from a scalar ``output``.

    Returns cotangents keyed by tensor ``uid``.  Tensors in ``wrt`` that the
    output does not depend on receive zero arrays.
    """
    if output.size != 1:
        raise AutodiffError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.uid: np.ones_like(output.data)}
    for node in reversed(_toposort(output)):
        g = grads.get(node.uid)
        if g is None or node.op is None:
            continue
        partials = node.op.vjp(g, node.data, *(p.data for p in node.parents))
        for parent, pg in zip(node.parents, partials):
            if not parent.requires_grad:
                continue
            if parent.uid in grads:
                grads[parent.uid] = grads[parent.uid] + pg
            else:
                grads[parent.uid] = np.asarray(pg, dtype=np.float64)
    if wrt is not None:
        for t in wrt:
            grads.setdefault(t.uid, np.zeros_like(t.data))
    return grads


def gradients(output: Tensor, wrt: Iterable[Tensor] | Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of ``output`` keyed by leaf name."""
    if isinstance(wrt, Mapping):
        named = dict(wrt)
    else:
        named = {t.name: t for t in wrt}
    g = backward(output, named.values())
    return {k: g[t.uid] for k, t in named.items()}


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]):
    """Evaluate ``fn(leaves)`` and its gradient with respect to every entry of ``params``."""
    leaves = {k: Tensor(v, name=k, requires_grad=True) for k, v in params.items()}
    out = fn(leaves)
    return float(out), gradients(out, leaves)


def grad_check(fn: Callable[[np.ndarray], Tensor | float], point, h: float = 1e-4,
               grad: np.ndarray | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``fn`` maps an array (wrapped as a leaf when differentiated) to a scalar.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(point, dtype=np.float64)
    if grad is None:
        leaf = Tensor(x0, name="x", requires_grad=True)
        grad = gradients(fn(leaf), [leaf])["x"]
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = float(fn(Tensor(xp.reshape(x0.shape))))
        fm = float(fn(Tensor(xm.reshape(x0.shape))))
        flat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(grad - numeric) / denom)) if x0.size else 0.0
