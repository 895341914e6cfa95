"""Reverse-mode automatic differentiation over float64 numpy arrays.

The graph is built dynamically: every operation on a :class:`Tensor` that
requires gradients records its parents and a local backward rule. Calling
:func:`backward` on a scalar walks the graph once in reverse topological
order and accumulates gradients into the leaves.

Broadcasting follows numpy's trailing-dimension rules; gradients are summed
back to the operand shape.
"""

import builtins
import contextlib

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

_STRICT = False
_RECORDING = True


def set_strict(flag):
    """Enable or disable finite-value and domain checking at op boundaries."""
    global _STRICT
    _STRICT = bool(flag)


def is_strict():
    return _STRICT


@contextlib.contextmanager
def strict(flag=True):
    old = _STRICT
    set_strict(flag)
    try:
        yield
    finally:
        set_strict(old)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _RECORDING
    old = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_live", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._live = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        """Same data, cut from the graph."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._live = ()
        t._backward = None
        t.op = "leaf"
        t.name = self.name
        return t

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out, op):
    if _STRICT and not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite value produced by {op}")


def _make(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    needs = _RECORDING and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        # which parents wanted gradients when the node was built; freezing is
        # decided at graph-construction time, not at backward time
        out._live = tuple(p.requires_grad for p in parents)
        out._backward = backward
    else:
        out._parents = ()
        out._live = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# binary elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if _STRICT and np.any(b.data == 0):
        raise DomainError("div: division by zero")

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# unary elementwise: name -> (forward, derivative(x, y))


def _sigmoid(x):
    # split on sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


UNARY_RULES = {
    "exp": (np.exp, lambda x, y: y),
    "log": (np.log, lambda x, y: 1.0 / x),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "softplus": (_softplus, lambda x, y: _sigmoid(x)),
    "square": (np.square, lambda x, y: 2.0 * x),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "sqrt": (np.sqrt, lambda x, y: 0.5 / y),
}


def unary(name, a):
    a = as_tensor(a)
    try:
        fwd, _ = UNARY_RULES[name]
    except KeyError:
        raise ContractError(f"unknown elementwise op {name!r}") from None
    if _STRICT and name in ("log", "sqrt") and np.any(a.data <= 0 if name == "log" else a.data < 0):
        raise DomainError(f"{name}: argument outside domain")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        y = fwd(a.data)

    def bw(g):
        # looked up at backward time so a patched rule takes effect
        return (g * UNARY_RULES[name][1](a.data, y),)

    return _make(y, (a,), bw, name)


def exp(a):
    return unary("exp", a)


def log(a):
    return unary("log", a)


def sigmoid(a):
    return unary("sigmoid", a)


def softplus(a):
    return unary("softplus", a)


def square(a):
    return unary("square", a)


def relu(a):
    return unary("relu", a)


def sqrt(a):
    return unary("sqrt", a)


def identity(a):
    return as_tensor(a)


def log_sigmoid(a):
    """log(sigmoid(a)) computed as -softplus(-a)."""
    return neg(softplus(neg(a)))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "square": square,
}


def elementwise(op, *args):
    """Dispatch a named pointwise operation."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


@contextlib.contextmanager
def corrupted_rule(name, factor=1.5):
    """Temporarily scale the derivative of a unary op (mutation testing)."""
    fwd, deriv = UNARY_RULES[name]
    UNARY_RULES[name] = (fwd, lambda x, y: factor * deriv(x, y))
    try:
        yield
    finally:
        UNARY_RULES[name] = (fwd, deriv)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw, "take")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of nothing")
    nd = tensors[0].ndim
    ax = axis + nd if axis < 0 else axis
    if not 0 <= ax < nd:
        raise DimensionError(f"concat: axis {axis} out of range for {nd}-d tensors")
    for t in tensors[1:]:
        if t.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax
        ):
            raise DimensionError(
                f"concat: extents {tensors[0].shape} and {t.shape} differ off axis {ax}"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def split(a, sizes, axis=-1):
    """Inverse of :func:`concat`: cut ``a`` into pieces of the given extents."""
    a = as_tensor(a)
    ax = axis + a.ndim if axis < 0 else axis
    if builtins.sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split: sizes {sizes} do not cover extent {a.shape[ax]}")
    pieces, lo = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(lo, lo + n)
        pieces.append(take(a, tuple(sl)))
        lo += n
    return pieces


# ---------------------------------------------------------------------------
# reductions


def _check_axis(a, axis, op):
    if axis is None:
        return None
    ax = axis + a.ndim if axis < 0 else axis
    if not 0 <= ax < a.ndim:
        raise DimensionError(f"{op}: axis {axis} invalid for shape {a.shape}")
    return ax


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    ax = _check_axis(a, axis, "sum")

    def bw(g):
        if ax is not None:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=ax)), (a,), bw, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    ax = _check_axis(a, axis, "mean")
    n = a.data.size if ax is None else a.shape[ax]

    def bw(g):
        if ax is not None:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=ax)), (a,), bw, "mean")


def reduce(op, a, axis=None):
    if op == "sum":
        return sum(a, axis)
    if op == "mean":
        return mean(a, axis)
    raise ContractError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# backward pass


def topological_order(root):
    """Nodes reachable from ``root`` with every node after all of its parents."""
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Returns the number of graph nodes visited.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return 0
    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    visited = 0
    for node in reversed(order):
        g = grads.pop(id(node), None)
        visited += 1
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, live, pg in zip(node._parents, node._live, node._backward(g)):
            if not live:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return visited


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, inputs, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the tensors in ``inputs`` (a Tensor or a list of them) to a
    scalar Tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            if not t.data.flags.c_contiguous:
                t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*inputs).data)
                flat[i] = orig - h
                fm = float(f(*inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]))
                worst = max(worst, err)
    for t, flag in zip(inputs, saved):
        t.requires_grad = flag
        t.grad = None
    return worst
