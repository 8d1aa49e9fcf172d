"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every op returns a fresh :class:`Node`. A node only records its parents when at
least one parent requires a gradient, so computations over frozen weights build
no graph at all.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes do not fit its rule."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block, regardless of ``requires_grad``."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    """A value in the computation graph.

    ``data`` is never modified after construction; ``grad`` is allocated on
    first access and accumulates contributions during :func:`backprop`.
    """

    __slots__ = ("data", "_grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Node"] = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ShapeError("grad", self.data.shape, value.shape)
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def const(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(data, op: str, parents: Sequence[Node], backward: Callable) -> Node:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Node(data, True, op, parents, backward)
    return Node(data, False, op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = const(a), const(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def tanh(a: Node) -> Node:
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Node) -> Node:
    x = a.data
    # split by sign so exp never overflows
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Node) -> Node:
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Node) -> Node:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y, "gelu", (a,), backward)


def exp(a: Node) -> Node:
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a: Node, floor: float = 0.0) -> Node:
    """Natural log; entries below ``floor`` are clamped and pass no gradient."""
    x = a.data
    if floor > 0:
        clamped = x < floor
        safe = np.where(clamped, floor, x)
    else:
        clamped = np.zeros(x.shape, dtype=bool)
        safe = x
    y = np.log(safe)
    return _make(y, "log", (a,), lambda g: (np.where(clamped, 0.0, g / safe),))


def minimum(a, b) -> Node:
    """Elementwise min; at ties the gradient routes to ``a``."""
    a, b = const(a), const(b)
    _broadcast_shape("minimum", a, b)
    first = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _make(np.minimum(a.data, b.data), "minimum", (a, b),
                 lambda g: (_unbroadcast(g * first, sa), _unbroadcast(g * ~first, sb)))


# ------------------------------------------------------------------- linear

def matmul(a, b) -> Node:
    """numpy ``@`` semantics (batch dims broadcast); 1-D operands are promoted."""
    a, b = const(a), const(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape, detail="scalar operand")
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    try:
        out = a2 @ b2
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions") from None
    sa, sb = a.shape, b.shape
    squeeze_a, squeeze_b = a.ndim == 1, b.ndim == 1
    y = out
    if squeeze_a:
        y = y[..., 0, :]
    if squeeze_b:
        y = y[..., 0]

    def backward(g):
        if squeeze_b:
            g = np.expand_dims(g, -1)
        if squeeze_a:
            g = np.expand_dims(g, -2)
        ga = _unbroadcast(g @ np.swapaxes(b2, -1, -2), a2.shape).reshape(sa)
        if b2.ndim == 2 and a2.ndim > 2:
            # weight matrix shared across the batch: fold batch into rows
            gb = a2.reshape(-1, a2.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g, b2.shape)
        return ga, gb.reshape(sb)

    return _make(y, "matmul", (a, b), backward)


# ------------------------------------------------------------ reductions

def _norm_axis(axis: int, ndim: int, op: str, shape) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(op, shape, detail=f"axis {axis} out of range")
    return axis % ndim


def reduce_sum(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(y, "sum", (a,), backward)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.shape
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[ax] for ax in axes]))
    if n == 0:
        raise ShapeError("mean", shape, detail="empty reduction")
    y = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(y, "mean", (a,), backward)


def softmax(a: Node, axis: int = -1) -> Node:
    axis = _norm_axis(axis, a.ndim, "softmax", a.shape)
    if a.shape[axis] == 0:
        raise ShapeError("softmax", a.shape, detail="softmax over empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (a,), backward)


def log_softmax(a: Node, axis: int = -1) -> Node:
    axis = _norm_axis(axis, a.ndim, "log_softmax", a.shape)
    if a.shape[axis] == 0:
        raise ShapeError("log_softmax", a.shape, detail="softmax over empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, "log_softmax", (a,), backward)


# --------------------------------------------------------- shape plumbing

def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = [const(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat", detail="no inputs")
    ndim = nodes[0].ndim
    axis = _norm_axis(axis, ndim, "concat", nodes[0].shape)
    try:
        y = np.concatenate([n.data for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[n.shape for n in nodes]) from None
    splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(y, "concat", nodes, backward)


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [const(n) for n in nodes]
    try:
        y = np.stack([n.data for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[n.shape for n in nodes]) from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(y, "stack", nodes, backward)


def reshape(a: Node, shape) -> Node:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _make(y, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Node, axes) -> Node:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def getitem(a: Node, key) -> Node:
    y = a.data[key]
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.array(y), "getitem", (a,), backward)


def embedding(table: Node, ids) -> Node:
    """Row lookup: ``table[ids]`` with ids of any integer shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding", table.shape, ids.shape, detail="ids must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape, detail="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape, detail="id out of range")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[ids], "embedding", (table,), backward)


def take_last(a: Node, idx) -> Node:
    """Gather ``a[..., idx]`` along the last axis; ``idx`` matches ``a.shape[:-1]``."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError("take_last", a.shape, idx.shape)
    y = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _make(y, "take_last", (a,), backward)


def nll_gather(logp: Node, targets, mask=None) -> Node:
    """-sum(mask * logp[..., target]); logp holds log-probabilities."""
    targets = np.asarray(targets)
    if targets.shape != logp.shape[:-1]:
        raise ShapeError("nll_gather", logp.shape, targets.shape)
    m = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != targets.shape:
        raise ShapeError("nll_gather", targets.shape, m.shape, detail="mask")
    picked = np.take_along_axis(logp.data, targets[..., None], axis=-1)[..., 0]
    shape = logp.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, targets[..., None], (-g * m)[..., None], axis=-1)
        return (out,)

    return _make(np.array(-(picked * m).sum()), "nll_gather", (logp,), backward)


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Normalise the last axis, then apply elementwise gain and bias."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(y, "layer_norm", (x, gain, bias), backward)


def _sig(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_scan(x_proj: Node, w_h: Node) -> Node:
    """Unidirectional LSTM from zero state over pre-projected inputs.

    ``x_proj`` (B, K, 4H) already holds ``x_t W_x + b``; gate order along the
    last axis is input, forget, output, candidate. Returns all hidden states
    (B, K, H). Backward is truncation-free backpropagation through time.
    """
    if x_proj.ndim != 3 or w_h.ndim != 2 or x_proj.shape[-1] != w_h.shape[1] or w_h.shape[1] != 4 * w_h.shape[0]:
        raise ShapeError("lstm_scan", x_proj.shape, w_h.shape)
    B, K, _ = x_proj.shape
    H = w_h.shape[0]
    W = w_h.data
    hs = np.zeros((B, K + 1, H))
    cs = np.zeros((B, K + 1, H))
    gates = np.zeros((B, K, 4 * H))
    for t in range(K):
        z = x_proj.data[:, t] + hs[:, t] @ W
        g = gates[:, t]
        g[:, :3 * H] = _sig(z[:, :3 * H])
        g[:, 3 * H:] = np.tanh(z[:, 3 * H:])
        cs[:, t + 1] = g[:, H:2 * H] * cs[:, t] + g[:, :H] * g[:, 3 * H:]
        hs[:, t + 1] = g[:, 2 * H:3 * H] * np.tanh(cs[:, t + 1])

    def backward(gh):
        dx = np.zeros((B, K, 4 * H))
        dw = np.zeros_like(W)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(K - 1, -1, -1):
            g = gates[:, t]
            i, f, o, cand = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
            tc = np.tanh(cs[:, t + 1])
            dh = gh[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dx[:, t]
            dz[:, :H] = dc * cand * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
            dz[:, 3 * H:] = dc * i * (1.0 - cand * cand)
            dc_next = dc * f
            dw += hs[:, t].T @ dz
            dh_next = dz @ W.T
        return dx, dw

    return _make(hs[:, 1:].copy(), "lstm_scan", (x_proj, w_h), backward)


# ------------------------------------------------------------ backprop

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError(f"cycle detected at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad:
                ps = state.get(id(p))
                if ps == 1:
                    raise GraphError(f"cycle detected at {p!r}")
                if ps is None:
                    stack.append((p, False))
    return order


def backprop(loss: Node) -> None:
    """Accumulate dLoss/dNode into ``grad`` of every ancestor requiring it."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise GraphError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    seeds: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = seeds.pop(id(node), None)
        if g is None:
            continue
        if node._grad is None:
            node._grad = g
        else:
            node._grad = node._grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            prev = seeds.get(id(parent))
            seeds[id(parent)] = pg if prev is None else prev + pg
