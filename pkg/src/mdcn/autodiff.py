"""Small reverse-mode autodiff over float64 numpy arrays.

Each op computes its value eagerly and records two backward rules: a numpy
rule used by :func:`backward`, and a graph rule (``vjp``) built from other
ops, used when a gradient must itself be differentiated
(``grad(..., create_graph=True)``).
"""
from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Node", "Parameter", "constant", "as_node", "backward", "grad",
    "add", "sub", "mul", "matmul", "scale", "mean", "sum", "abs", "square",
    "sqrt", "elu", "elu_derivative", "sigmoid", "tanh", "concat", "take",
    "Adam", "AdamState", "NonFiniteGradientError",
]

class NonFiniteGradientError(FloatingPointError):
    pass


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward", "_vjp")

    def __init__(self, value, parents=(), op="leaf", requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._vjp = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Node):
    """Leaf that persists across steps and collects gradients."""

    __slots__ = ()

    def __init__(self, value):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _make(value, parents, op, backward_fn, vjp_fn=None):
    out = Node(value, parents, op)
    if out.requires_grad:
        out._backward = backward_fn
        out._vjp = vjp_fn
    return out


def _reduce_to(g: Node, shape) -> Node:
    """Graph version of _unbroadcast."""
    if g.shape == shape:
        return g
    lead = g.value.ndim - len(shape)
    for _ in range(lead):
        g = sum(g, axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = sum(g, axis=axis, keepdims=True)
    return g


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a, b)

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.value + b.value, (a, b), "add", bw, vjp)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(scale(g, -1.0), b.shape)

    return _make(a.value - b.value, (a, b), "sub", bw, vjp)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    def vjp(g):
        return _reduce_to(mul(g, b), a.shape), _reduce_to(mul(g, a), b.shape)

    return _make(a.value * b.value, (a, b), "mul", bw, vjp)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.value @ b.value, (a, b), "matmul", bw, vjp)


# -- unary -------------------------------------------------------------------

def transpose(a) -> Node:
    a = as_node(a)
    return _make(a.value.T, (a,), "transpose", lambda g: (g.T,),
                 lambda g: (transpose(g),))


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return _make(a.value * c, (a,), "scale", lambda g: (g * c,),
                 lambda g: (scale(g, c),))


def sum(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    shape = a.shape

    def expand(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    def vjp(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(np.empty(g.shape), axis).shape)
        return (add(g, constant(np.zeros(shape))),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum",
                 lambda g: (expand(g),), vjp)


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    if n == 0:
        raise ValueError("mean of empty tensor")
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), "reshape",
                 lambda g: (g.reshape(old),), lambda g: (reshape(g, old),))


def abs(a) -> Node:
    a = as_node(a)
    sign = np.sign(a.value)
    return _make(np.abs(a.value), (a,), "abs", lambda g: (g * sign,),
                 lambda g: (mul(g, constant(sign)),))


def square(a) -> Node:
    a = as_node(a)
    return _make(a.value * a.value, (a,), "square",
                 lambda g: (2.0 * g * a.value,),
                 lambda g: (scale(mul(g, a), 2.0),))


def sqrt(a, eps: float = 0.0) -> Node:
    a = as_node(a)
    r = np.sqrt(a.value + eps)

    def bw(g):
        return (g * 0.5 / r,)

    return _make(r, (a,), "sqrt", bw)


def elu(a) -> Node:
    a = as_node(a)
    e = np.exp(np.minimum(a.value, 0.0))
    value = np.maximum(a.value, 0.0)
    value += e
    value -= 1.0

    def bw(g):
        # d/da elu = exp(min(a, 0))
        return (g * e,)

    def vjp(g):
        return (mul(g, elu_derivative(a)),)

    return _make(value, (a,), "elu", bw, vjp)


def elu_derivative(a) -> Node:
    """Elementwise derivative of ELU: 1 for a > 0, exp(a) otherwise."""
    a = as_node(a)
    e = np.exp(np.minimum(a.value, 0.0))

    def bw(g):
        return (np.where(a.value > 0, 0.0, g * e),)

    return _make(e, (a,), "elu_derivative", bw)


def sigmoid(a) -> Node:
    a = as_node(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Node:
    a = as_node(a)
    t = np.tanh(a.value)
    return _make(t, (a,), "tanh", lambda g: (g * (1.0 - t * t),))


def concat(nodes, axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        shapes = " and ".join(str(n.shape) for n in nodes)
        raise ValueError(f"concat: incompatible shapes {shapes}") from None
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    def vjp(g):
        out, start = [], 0
        for size in sizes:
            out.append(_slice_axis(g, start, start + size, axis))
            start += size
        return tuple(out)

    return _make(value, nodes, "concat", bw, vjp)


def _slice_axis(a, start, stop, axis):
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    return take(a, tuple(idx))


def take(a, index, unique: bool = False) -> Node:
    """Basic or fancy indexing, ``a[index]``.

    ``unique=True`` promises that a fancy index has no repeats, which allows a
    plain assignment instead of an unbuffered scatter-add in the backward pass.
    """
    a = as_node(a)
    shape = a.shape
    basic = isinstance(index, (slice, int)) or (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index))

    def bw(g):
        full = np.zeros(shape)
        if basic or unique:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    def vjp(g):
        return (_scatter(g, index, shape),)

    return _make(a.value[index], (a,), "slice", bw, vjp)


def _scatter(g, index, shape) -> Node:
    def bw(gg):
        return (gg[index],)

    full = np.zeros(shape)
    np.add.at(full, index, g.value)
    return _make(full, (g,), "scatter", bw, lambda gg: (take(gg, index),))


# -- reverse pass -------------------------------------------------------------

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.value)}
    for node in _topo(root):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(root: Node, inputs, create_graph: bool = False):
    """Gradients of scalar ``root`` with respect to ``inputs``.

    With ``create_graph=True`` the returned nodes are built from graph ops and
    can be differentiated again; ops without a graph rule raise
    ``NotImplementedError``.
    """
    if root.value.size != 1:
        raise ValueError(f"grad needs a scalar root, got shape {root.shape}")
    inputs = list(inputs)
    order = _topo(root)
    wanted = {id(x) for x in inputs}
    if create_graph:
        grads = {id(root): constant(np.ones_like(root.value))}
        for node in order:
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            if node._vjp is None:
                raise NotImplementedError(
                    f"op {node.op!r} has no rule for differentiating through its gradient")
            for parent, pg in zip(node.parents, node._vjp(g)):
                if parent.requires_grad:
                    key = id(parent)
                    grads[key] = pg if key not in grads else add(grads[key], pg)
            if id(node) not in wanted:
                del grads[id(node)]
        return [grads.get(id(x), constant(np.zeros(x.shape))) for x in inputs]

    grads = {id(root): np.ones_like(root.value)}
    for node in order:
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if parent.requires_grad:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        if id(node) not in wanted:
            del grads[id(node)]
    return [constant(grads.get(id(x), np.zeros(x.shape))) for x in inputs]


# -- optimizer ----------------------------------------------------------------

class AdamState:
    """First/second moments and step count for one group of parameters."""

    def __init__(self, shapes, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params, grads, state: AdamState):
    """Apply one bias-corrected Adam update in place and return ``params``."""
    if len(params) != len(state.m):
        raise ValueError(f"{len(params)} parameters but state tracks {len(state.m)}")
    for i, g in enumerate(grads):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient for parameter {i} (shape {g.shape}) at Adam step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != m.shape:
            raise ValueError(f"gradient shape {g.shape} does not match moment shape {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Adam over a fixed list of :class:`Parameter` nodes."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState([p.shape for p in self.params], lr, beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


def finite_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (float64, same shape)."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return out


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
