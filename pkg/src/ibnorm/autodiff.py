"""Dense f64 tensors with a recording tape for reverse-mode differentiation.

The engine is deliberately small: a closed set of primitives (the ones the
normalization layers and the training harness actually use), an explicit
broadcast op instead of implicit broadcasting, and one tape (`Graph`) per
forward pass. Everything is float64 and row-major.

Subgradient conventions: sign is treated as locally constant (gradient 0)
and d|u|/du is 0 at u = 0.
"""

import numpy as np

from .errors import ContractError, GradCheckError, NumericError, ShapeError


class Tensor:
    """Dense n-dimensional f64 array, optionally tracked for gradients."""

    __slots__ = ("array", "requires_grad")

    def __init__(self, array, requires_grad=False):
        # views (e.g. broadcast results) are kept as-is; consumers that need
        # contiguity copy at the boundary (checkpoint writes, kernels)
        self.array = np.asarray(array, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.array.shape

    @property
    def ndim(self):
        return self.array.ndim

    @property
    def size(self):
        return self.array.size

    @property
    def data(self):
        """Flat row-major view of the underlying storage."""
        return self.array.reshape(-1)

    def item(self):
        return float(self.array.reshape(-1)[0]) if self.array.size == 1 else None

    def __repr__(self):
        return f"Tensor(shape={self.array.shape}, requires_grad={self.requires_grad})"


class Node:
    """One recorded primitive application: operands, output, backward rule."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_GRAPH_STACK = []


class Graph:
    """Recording tape. Nodes are appended in execution (topological) order."""

    def __init__(self, debug=False):
        self.nodes = []
        self.debug = debug

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False


def active_graph():
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def record(op, inputs, out_array, backward):
    """Create the output tensor and record the node when gradients are needed.

    `backward` maps the output gradient to a tuple of per-input gradients
    (None for non-differentiable slots). Exposed so modules owning composite
    rules (compression, power transform) can register fused nodes.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_array, requires_grad=requires)
    graph = active_graph()
    if graph is not None and requires:
        if graph.debug and not np.all(np.isfinite(out_array)):
            raise NumericError(f"non-finite output of primitive '{op}'")
        graph.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ "
                         "(use broadcast explicitly)")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    _check_same_shape("add", a, b)
    return record("add", (a, b), a.array + b.array,
                  lambda g: (g, g))


def sub(a, b):
    _check_same_shape("sub", a, b)
    return record("sub", (a, b), a.array - b.array,
                  lambda g: (g, -g))


def mul(a, b):
    _check_same_shape("mul", a, b)
    av, bv = a.array, b.array
    return record("mul", (a, b), av * bv,
                  lambda g: (g * bv if a.requires_grad else None,
                             g * av if b.requires_grad else None))


def div(a, b):
    _check_same_shape("div", a, b)
    av, bv = a.array, b.array
    if np.any(bv == 0.0):
        raise ContractError("div: zero denominator (guard with +epsilon)")
    out = av / bv
    return record("div", (a, b), out,
                  lambda g: (g / bv if a.requires_grad else None,
                             -g * out / bv if b.requires_grad else None))


def scale(x, c):
    c = float(c)
    return record("scale", (x,), x.array * c, lambda g: (g * c,))


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _reduce_to_shape(g, shape):
    """Sum a gradient over batch dims that numpy broadcast during matmul."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a, b, transpose_a=False, transpose_b=False):
    av = _swap(a.array) if transpose_a else a.array
    bv = _swap(b.array) if transpose_b else b.array
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul: operands must have ndim >= 2")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dims {av.shape} x {bv.shape}")
    try:
        out = np.matmul(av, bv)
    except ValueError as e:
        raise ShapeError(f"matmul: batch dims {av.shape[:-2]} x {bv.shape[:-2]}") from e

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, _swap(bv))
            if transpose_a:
                ga = _swap(ga)
            ga = _reduce_to_shape(ga, a.array.shape)
        if b.requires_grad:
            gb = np.matmul(_swap(av), g)
            if transpose_b:
                gb = _swap(gb)
            gb = _reduce_to_shape(gb, b.array.shape)
        return ga, gb

    return record("matmul", (a, b), out, backward)


def _expand_reduced(g, x_shape, axis, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x_shape)


def mean_axis(x, axis=-1, keepdims=False):
    xv = x.array
    n = xv.shape[axis]
    out = xv.mean(axis=axis, keepdims=keepdims)
    return record("mean_axis", (x,), out,
                  lambda g: (_expand_reduced(g, xv.shape, axis, keepdims) / n,))


def sum_axis(x, axis=-1, keepdims=False):
    xv = x.array
    out = xv.sum(axis=axis, keepdims=keepdims)
    return record("sum_axis", (x,), out,
                  lambda g: (_expand_reduced(g, xv.shape, axis, keepdims).copy(),))


def var_axis(x, axis=-1, keepdims=False):
    """Population variance along one axis (divide by n)."""
    xv = x.array
    n = xv.shape[axis]
    mu = xv.mean(axis=axis, keepdims=True)
    centered = xv - mu
    out = (centered * centered).mean(axis=axis, keepdims=keepdims)

    def backward(g):
        ge = _expand_reduced(g, xv.shape, axis, keepdims)
        return (ge * (2.0 / n) * centered,)

    return record("var_axis", (x,), out, backward)


def sqrt(x):
    if np.any(x.array < 0.0):
        raise ContractError("sqrt: negative input")
    out = np.sqrt(x.array)
    return record("sqrt", (x,), out, lambda g: (g / (2.0 * out),))


def abs_(x):
    s = np.sign(x.array)
    return record("abs", (x,), np.abs(x.array), lambda g: (g * s,))


def sign(x):
    return record("sign", (x,), np.sign(x.array),
                  lambda g: (np.zeros_like(g),))


def tanh(x):
    out = np.tanh(x.array)
    return record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def ln1p(x):
    if np.any(x.array <= -1.0):
        raise ContractError("ln1p: input <= -1")
    xv = x.array
    return record("ln1p", (x,), np.log1p(xv), lambda g: (g / (1.0 + xv),))


def exp(x):
    out = np.exp(x.array)
    return record("exp", (x,), out, lambda g: (g * out,))


def relu(x):
    mask = x.array > 0.0
    return record("relu", (x,), np.where(mask, x.array, 0.0),
                  lambda g: (g * mask,))


def broadcast(x, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.array, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast: {x.shape} -> {shape}") from e
    x_shape = x.array.shape

    def backward(g):
        extra = g.ndim - len(x_shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        keep = tuple(i for i, d in enumerate(x_shape) if d == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return record("broadcast", (x,), out, backward)


def softmax_axis(x):
    """Softmax along the last axis, numerically stabilized."""
    xv = x.array
    z = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return record("softmax_axis", (x,), out, backward)


def gather(x, indices):
    """Row lookup: out[i1..ik, :] = x[indices[i1..ik], :] for a 2-D table."""
    if x.array.ndim != 2:
        raise ShapeError("gather: table must be 2-D")
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= x.array.shape[0]):
        raise ContractError("gather: index out of range")
    out = x.array[idx]

    def backward(g):
        if not x.requires_grad:
            return (None,)
        gt = np.zeros_like(x.array)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, x.array.shape[1]))
        return (gt,)

    return record("gather", (x,), out, backward)


_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "mean_axis": mean_axis, "var_axis": var_axis, "sqrt": sqrt, "abs": abs_,
    "sign": sign, "tanh": tanh, "ln1p": ln1p, "exp": exp, "scale": scale,
    "broadcast": broadcast, "sum_axis": sum_axis, "relu": relu,
    "softmax_axis": softmax_axis, "gather": gather,
}


def primitive_forward(op, *inputs, **kwargs):
    """Dispatch a primitive by name; the op set is closed."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive '{op}'") from None
    return fn(*inputs, **kwargs)


def const_like(x, value):
    """Untracked constant tensor with the shape of `x`."""
    return Tensor(np.full(x.array.shape, float(value)))


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(graph, loss):
    """Gradients of a scalar loss w.r.t. every requires_grad leaf in `graph`.

    Returns a dict keyed by Tensor (identity). Leaves that do not influence
    the loss get zero gradients.
    """
    if loss.array.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in graph.nodes}
    if graph.nodes and id(loss) not in produced:
        raise ContractError("backward: loss tensor was not produced on this graph")

    grads = {id(loss): np.ones_like(loss.array)}
    for node in reversed(graph.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = g if acc is None else acc + g

    result = {}
    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced and t not in result:
                result[t] = grads.get(id(t), np.zeros_like(t.array))
    if loss.requires_grad and id(loss) not in produced:
        result.setdefault(loss, np.ones_like(loss.array))
    return result


def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor and must be re-evaluable. Relative
    error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    x_req = Tensor(x.array.copy(), requires_grad=True)
    with Graph() as graph:
        y = f(x_req)
    if y.array.size != 1:
        raise ContractError("grad_check: f must return a scalar")
    grads = backward(graph, y)
    analytic = grads.get(x_req, np.zeros_like(x_req.array)).reshape(-1)

    flat = x.array.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        y_hi = f(Tensor(bumped.reshape(x.array.shape))).array.reshape(-1)[0]
        bumped[i] = flat[i] - eps
        y_lo = f(Tensor(bumped.reshape(x.array.shape))).array.reshape(-1)[0]
        numeric[i] = (y_hi - y_lo) / (2.0 * eps)

    for i in range(flat.size):
        if np.isnan(analytic[i]) or np.isnan(numeric[i]):
            raise GradCheckError(f"NaN gradient at coordinate {i}", coordinate=i)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
