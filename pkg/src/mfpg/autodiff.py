"""Tape-based reverse-mode differentiation over floating-point numpy arrays.

Every value in a graph is a :class:`Node`.  Leaves created with
``requires_grad=True`` are parameters; :func:`backward` walks the graph once in
reverse topological order and returns the gradient of a scalar loss with
respect to every named leaf it reaches.  Arrays are plain ``numpy.ndarray``
(float64 by default, float32 kept as is), row-major; they play the role of
the dense tensor type.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ContractError",
    "GraphConsumedError",
    "NonFiniteGradientError",
    "Node",
    "leaf",
    "constant",
    "parameters",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "affine",
    "dense",
    "tanh",
    "exp",
    "log",
    "square",
    "clip",
    "reduce_sum",
    "mean",
    "reshape",
    "columns",
    "log_softmax",
    "take",
    "init_mlp",
    "mlp_forward",
    "mlp_apply",
    "layer_widths",
    "AdamState",
    "adam_init",
    "adam_step",
    "global_norm",
]


class ContractError(ValueError):
    """Raised when operands violate a shape or domain precondition."""


class GraphConsumedError(RuntimeError):
    """Raised when backward is requested on a graph that was already consumed."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN or Inf."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x)
    return a if a.dtype == np.float64 or a.dtype == np.float32 else a.astype(np.float64)


class Node:
    """A value in the computation graph together with how to push gradients back."""

    __slots__ = ("value", "name", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = _as_array(value)
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.item())

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value, name=None) -> Node:
    """A differentiable leaf (a parameter)."""
    return Node(value, requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value)


def _node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def parameters(params: dict[str, np.ndarray], prefix: str = "") -> dict[str, Node]:
    """Wrap a parameter dict into named leaves, one per entry."""
    return {k: leaf(v, name=prefix + k) for k, v in params.items()}


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    return Node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    return Node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    a, b = _node(a), _node(b)
    return Node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def neg(a) -> Node:
    a = _node(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Node:
    """Matrix-matrix or matrix-vector product."""
    a, b = _node(a), _node(b)
    if a.value.ndim != 2 or b.value.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if b.value.ndim == 1:
            return np.outer(g, b.value), a.value.T @ g
        return g @ b.value.T, a.value.T @ g

    return Node(a.value @ b.value, (a, b), bw)


def affine(x, w, b) -> Node:
    """``x @ w + b`` for a batch of row vectors ``x``."""
    return add(matmul(x, w), b)


def tanh(a) -> Node:
    a = _node(a)
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Node:
    a = _node(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = _node(a)
    if np.any(a.value <= 0):
        raise ContractError("log of a non-positive value")
    return Node(np.log(a.value), (a,), lambda g: (g / a.value,))


def square(a) -> Node:
    a = _node(a)
    return Node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    a = _node(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return Node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def reduce_sum(a, axis=None) -> Node:
    a = _node(a)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Node(a.value.sum(axis=axis), (a,), bw)


def mean(a, axis=None) -> Node:
    a = _node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis), 1.0 / count)


def reshape(a, shape) -> Node:
    a = _node(a)
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def columns(a, start: int, stop: int) -> Node:
    """Select columns ``start:stop`` of a 2-D node."""
    a = _node(a)

    def bw(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        return (full,)

    return Node(a.value[:, start:stop], (a,), bw)


def log_softmax(a) -> Node:
    """Row-wise log-softmax of a 2-D node."""
    a = _node(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return Node(out, (a,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def take(a, index) -> Node:
    """Pick ``a[i, index[i]]`` for every row ``i``."""
    a = _node(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros_like(a.value)
        full[rows, index] = g
        return (full,)

    return Node(a.value[rows, index], (a,), bw)


# ------------------------------------------------------------------ backward


def _toposort(root: Node) -> list[Node]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Node) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every named leaf it depends on.

    The graph is consumed: intermediate nodes drop their parents, and a second
    call on the same loss raises :class:`GraphConsumedError`.
    """
    if loss._consumed:
        raise GraphConsumedError("backward() already ran on this graph")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.name is not None:
                out[node.name] = out[node.name] + g if node.name in out else g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    loss._consumed = True
    return out


# ----------------------------------------------------------------------- MLP


def init_mlp(sizes: list[int], rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights and zero biases for the given layer sizes."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        params[f"b{i}"] = np.zeros(fan_out, dtype=dtype)
    return params


_BLOCK_ROWS = 1024


def _n_layers(params) -> int:
    return len(params) // 2


def _check_input(params, x):
    # inputs take the parameters' precision
    x = np.asarray(x, dtype=params["W0"].dtype)
    if x.ndim == 1:
        x = x[None, :]
    fan_in = params["W0"].shape[0]
    if x.ndim != 2 or x.shape[1] != fan_in:
        raise ContractError(f"input has {x.shape[-1]} features, first layer expects {fan_in}")
    return x


def dense(x, w, b, activation: str | None = None, out=None) -> Node:
    """``activation(x @ w + b)`` as a single node.

    ``out`` may carry the already-computed result (e.g. activations recorded
    while acting) so the forward product is not repeated.
    """
    x, w, b = _node(x), _node(w), _node(b)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractError(f"dense shape mismatch: {x.shape} @ {w.shape}")
    if out is None:
        out = x.value @ w.value + b.value
        if activation == "tanh":
            np.tanh(out, out=out)
    else:
        out = _as_array(out)
        if out.shape != (x.shape[0], w.shape[1]):
            raise ContractError("cached activations do not match the layer shape")

    def bw(g):
        g = g.astype(out.dtype, copy=False)
        gx = np.empty(x.shape, out.dtype) if x.requires_grad else None
        gw = np.zeros(w.shape, out.dtype)
        gb = np.zeros(b.shape, out.dtype)
        # cache-sized row blocks; the block order is fixed, so results are reproducible
        for lo in range(0, len(g), _BLOCK_ROWS):
            hi = lo + _BLOCK_ROWS
            if activation == "tanh":
                gz = out[lo:hi] * out[lo:hi]
                np.subtract(1.0, gz, out=gz)
                gz *= g[lo:hi]
            else:
                gz = g[lo:hi]
            if gx is not None:
                np.matmul(gz, w.value.T, out=gx[lo:hi])
            gw += x.value[lo:hi].T @ gz
            gb += gz.sum(axis=0)
        return gx, gw, gb

    return Node(out, (x, w, b), bw)


def mlp_forward(nodes: dict[str, Node], x, nonlinearity: str = "tanh", cache=None) -> Node:
    """Differentiable forward pass; hidden layers use ``nonlinearity``, the head is linear.

    ``x`` is a batch of row vectors (a single vector is treated as a batch of one).
    ``cache``, if given, lists each layer's output for this exact input, as
    returned by ``mlp_apply(..., record=True)``.
    """
    x = _check_input({k: n.value for k, n in nodes.items()}, x)
    h: Node = constant(x)
    n = len(nodes) // 2
    for i in range(n):
        act = nonlinearity if i < n - 1 else None
        h = dense(h, nodes[f"W{i}"], nodes[f"b{i}"], act, None if cache is None else cache[i])
    return h


def mlp_apply(params: dict[str, np.ndarray], x, nonlinearity: str = "tanh", record: bool = False,
              out=None):
    """Graph-free forward pass with the same arithmetic as :func:`mlp_forward`.

    With ``record=True`` returns ``(output, layer_outputs)``.  ``out`` optionally
    supplies one preallocated array per layer to write the outputs into.
    """
    h = _check_input(params, x)
    if out is None and not record and len(h) > 2 * _BLOCK_ROWS:
        return np.concatenate([mlp_apply(params, h[lo:lo + _BLOCK_ROWS], nonlinearity)
                               for lo in range(0, len(h), _BLOCK_ROWS)])
    n = _n_layers(params)
    outs = []
    for i in range(n):
        if out is None:
            h = h @ params[f"W{i}"]
        else:
            h = np.matmul(h, params[f"W{i}"], out=out[i])
        h += params[f"b{i}"]
        if i < n - 1 and nonlinearity == "tanh":
            np.tanh(h, out=h)
        outs.append(h)
    return (h, outs) if record else h


def layer_widths(params: dict[str, np.ndarray]) -> list[int]:
    return [params[f"W{i}"].shape[1] for i in range(_n_layers(params))]


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict[str, np.ndarray], **kwargs) -> AdamState:
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return AdamState(m=zeros, v={k: np.zeros_like(v) for k, v in params.items()}, **kwargs)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))


def adam_step(params, grads, state: AdamState, lr: float, max_grad_norm: float | None = None):
    """One bias-corrected Adam update after global L2-norm clipping.

    Returns ``(new_params, new_state)``; the inputs are left untouched.  A
    gradient with NaN/Inf raises :class:`NonFiniteGradientError`.
    """
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    for k, p in params.items():
        g = grads.get(k)
        if g is None or g.shape != p.shape:
            raise ContractError(f"gradient for {k!r} missing or misshapen")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {k!r}")
    scale = 1.0
    if max_grad_norm is not None:
        norm = global_norm({k: grads[k] for k in params})
        if norm > max_grad_norm:
            scale = max_grad_norm / norm
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False) * scale
        m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m[k] / (1.0 - b1**t)
        v_hat = v[k] / (1.0 - b2**t)
        new_params[k] = (p - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return new_params, AdamState(t, m, v, b1, b2, state.eps)
