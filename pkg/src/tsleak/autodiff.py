"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a :class:`Node` wraps a numpy array and
remembers how it was produced. ``backward`` walks the recorded graph and
returns gradients that are themselves nodes, so an objective built on top
of a gradient (e.g. a distance between gradient vectors) can be
differentiated again. Graphs are built eagerly per forward pass and become
garbage as soon as the caller drops its references; nothing is cached
between passes.

Conventions:
  * everything is float64; values are validated as finite on scalar
    results always, and on every op when debug checks are enabled,
  * dropout never samples randomness here; callers multiply by an
    explicit mask tensor,
  * gradients of leaves that a loss never touches are explicit zeros.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "ShapeError",
    "NonFiniteError",
    "constant",
    "variable",
    "as_node",
    "backward",
    "set_debug_checks",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "sum_",
    "mean_",
    "concat",
    "gather",
    "scatter_add",
    "max_along",
    "sigmoid",
    "tanh",
    "relu",
    "absolute",
    "max_with_scalar",
    "sqrt",
    "clamp01",
    "conv1d_causal_dilated",
    "conv1d_same",
]


class ShapeError(ValueError):
    """Operands do not conform for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a computed value."""


_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-operation finiteness checks (slow; meant for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Node:
    """One value in a differentiable computation graph.

    ``parents`` and ``vjps`` run in lock-step: ``vjps[i]`` maps the
    cotangent of this node to the contribution for ``parents[i]``. VJPs
    are written in terms of graph operations, which is what makes
    returned gradients differentiable in turn.
    """

    __slots__ = ("value", "parents", "vjps", "requires_grad", "op")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        vjps: tuple[Callable[["Node"], "Node"], ...] = (),
        requires_grad: bool = False,
        op: str = "leaf",
    ):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Node":
        return Node(self.value, op="const")

    # -- operator sugar -------------------------------------------------
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

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> "Node":
        return transpose(self)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, grad={self.requires_grad})"


def _asarray(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def constant(x, op: str = "const") -> Node:
    return Node(_asarray(x), op=op)


def variable(x) -> Node:
    """A leaf the caller intends to differentiate with respect to."""
    return Node(_asarray(x), requires_grad=True, op="var")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by op {op!r}")


def _make(value: np.ndarray, parents: tuple[Node, ...], vjps, op: str, check: bool = False) -> Node:
    # Scalars are always validated; div/sqrt (the ops that can mint
    # NaN/Inf from finite inputs) pass check=True; debug mode checks all.
    if check or _DEBUG_CHECKS or value.ndim == 0:
        _check_finite(value, op)
    for p in parents:
        if p.requires_grad:
            return Node(value, parents, vjps, True, op)
    # No differentiable ancestry: fold to a constant and let the graph go.
    return Node(value, op=op)


# -- broadcasting helpers ----------------------------------------------


def _unbroadcast(g: Node, shape: tuple[int, ...]) -> Node:
    """Reduce a broadcast cotangent back to ``shape``."""
    if g.value.shape == shape:
        return g
    extra = g.value.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.value.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.value.shape != shape:
        g = reshape(g, shape)
    return g


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value + b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ),
        "add",
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value - b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(neg(g), b.value.shape),
        ),
        "sub",
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(mul(g, b), a.value.shape),
            lambda g: _unbroadcast(mul(g, a), b.value.shape),
        ),
        "mul",
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value
    return _make(
        value,
        (a, b),
        (
            lambda g: _unbroadcast(div(g, b), a.value.shape),
            lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.value.shape),
        ),
        "div",
        check=True,
    )


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), (lambda g: neg(g),), "neg")


# -- linear algebra / structure ------------------------------------------


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.value.shape} @ {b.value.shape}")
    return _make(
        a.value @ b.value,
        (a, b),
        (
            lambda g: matmul(g, transpose(b)),
            lambda g: matmul(transpose(a), g),
        ),
        "matmul",
    )


def transpose(a, axes: tuple[int, ...] | None = None) -> Node:
    a = as_node(a)
    if axes is None:
        if a.value.ndim != 2:
            raise ShapeError("default transpose is for 2-D arrays; pass axes")
        axes = (1, 0)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _make(
        np.transpose(a.value, axes),
        (a,),
        (lambda g: transpose(g, inv),),
        "transpose",
    )


def reshape(a, shape: Sequence[int]) -> Node:
    a = as_node(a)
    old = a.value.shape
    return _make(
        np.reshape(a.value, shape),
        (a,),
        (lambda g: reshape(g, old),),
        "reshape",
    )


def broadcast_to(a, shape: Sequence[int]) -> Node:
    a = as_node(a)
    old = a.value.shape
    return _make(
        np.broadcast_to(a.value, shape).copy(),
        (a,),
        (lambda g: _unbroadcast(g, old),),
        "broadcast",
    )


def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    old = a.value.shape
    if axis is None:
        norm_axes = tuple(range(a.value.ndim))
    elif isinstance(axis, int):
        norm_axes = (axis % a.value.ndim,)
    else:
        norm_axes = tuple(ax % a.value.ndim for ax in axis)

    def vjp(g: Node) -> Node:
        if not keepdims:
            kept = [1 if i in norm_axes else n for i, n in enumerate(old)]
            g = reshape(g, kept)
        return broadcast_to(g, old)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), (vjp,), "sum")


def mean_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    total = a.value.size
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        total = 1
        for ax in axes:
            total *= a.value.shape[ax % a.value.ndim]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / total)


def getitem(a, key) -> Node:
    a = as_node(a)
    old = a.value.shape
    out = a.value[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    return _make(out, (a,), (lambda g: _unslice(g, old, key),), "slice")


def _unslice(g, shape: tuple[int, ...], key) -> Node:
    """Embed a sliced cotangent into a zero array of the original shape."""
    g = as_node(g)

    def fwd():
        z = np.zeros(shape)
        z[key] = g.value
        return z

    return _make(fwd(), (g,), (lambda gg: getitem(gg, key),), "unslice")


def concat(parts: Iterable[Node], axis: int = 0) -> Node:
    parts = [as_node(p) for p in parts]
    value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    nd = parts[0].value.ndim
    ax = axis % nd

    def make_vjp(i: int):
        key = tuple(
            slice(offsets[i], offsets[i + 1]) if d == ax else slice(None) for d in range(nd)
        )
        return lambda g: getitem(g, key)

    return _make(value, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))), "concat")


def gather(a, indices: np.ndarray, axis: int) -> Node:
    """``np.take`` along ``axis``; the cotangent scatters back additively."""
    a = as_node(a)
    idx = np.asarray(indices)
    old = a.value.shape
    return _make(
        np.take(a.value, idx, axis=axis),
        (a,),
        (lambda g: scatter_add(g, idx, axis, old),),
        "gather",
    )


def scatter_add(g, indices: np.ndarray, axis: int, shape: tuple[int, ...]) -> Node:
    """Adjoint of :func:`gather`: add slices of ``g`` into zeros of ``shape``."""
    g = as_node(g)
    idx = np.asarray(indices)
    ax = axis % len(shape)
    pre = len(shape[:ax])

    def fwd():
        gm = np.moveaxis(g.value, tuple(range(pre, pre + idx.ndim)), tuple(range(idx.ndim)))
        gm = gm.reshape(idx.size, *shape[:ax], *shape[ax + 1 :])
        out = np.zeros((shape[ax], *shape[:ax], *shape[ax + 1 :]))
        np.add.at(out, idx.reshape(-1), gm)
        return np.moveaxis(out, 0, ax)

    return _make(fwd(), (g,), (lambda gg: gather(gg, idx, ax),), "scatter_add")


def max_along(a, axis: int) -> Node:
    """Max-reduce one axis; ties resolve to the first index."""
    a = as_node(a)
    ax = axis % a.value.ndim
    arg = np.argmax(a.value, axis=ax)
    mask = np.zeros_like(a.value)
    np.put_along_axis(mask, np.expand_dims(arg, ax), 1.0, axis=ax)
    mask_c = constant(mask)
    old = a.value.shape

    def vjp(g: Node) -> Node:
        kept = [1 if i == ax else n for i, n in enumerate(old)]
        return mul(broadcast_to(reshape(g, kept), old), mask_c)

    return _make(np.max(a.value, axis=ax), (a,), (vjp,), "max_along")


# -- nonlinearities -------------------------------------------------------


def sigmoid(a) -> Node:
    a = as_node(a)
    out_value = 0.5 * (1.0 + np.tanh(0.5 * a.value))  # stable logistic
    out = _make(out_value, (a,), (), "sigmoid")
    if out.requires_grad:
        out.vjps = (lambda g: mul(g, mul(out, sub(1.0, out))),)
    return out


def tanh(a) -> Node:
    a = as_node(a)
    out = _make(np.tanh(a.value), (a,), (), "tanh")
    if out.requires_grad:
        out.vjps = (lambda g: mul(g, sub(1.0, mul(out, out))),)
    return out


def relu(a) -> Node:
    a = as_node(a)
    mask = constant((a.value > 0).astype(np.float64))
    return _make(np.maximum(a.value, 0.0), (a,), (lambda g: mul(g, mask),), "relu")


def absolute(a) -> Node:
    a = as_node(a)
    sign = constant(np.sign(a.value))
    return _make(np.abs(a.value), (a,), (lambda g: mul(g, sign),), "abs")


def max_with_scalar(a, c: float) -> Node:
    a = as_node(a)
    mask = constant((a.value > c).astype(np.float64))
    return _make(np.maximum(a.value, c), (a,), (lambda g: mul(g, mask),), "max_scalar")


def sqrt(a) -> Node:
    a = as_node(a)
    with np.errstate(invalid="ignore"):
        value = np.sqrt(a.value)
    out = _make(value, (a,), (), "sqrt", check=True)
    if out.requires_grad:
        out.vjps = (lambda g: div(mul(g, 0.5), out),)
    return out


def clamp01(a) -> Node:
    """Differentiable clamp to [0, 1] (slope 1 inside, 0 outside)."""
    return sub(relu(a), relu(sub(a, 1.0)))


# -- convolutions ---------------------------------------------------------


def conv1d_causal_dilated(x, kernel, dilation: int = 1) -> Node:
    """Causal dilated 1-D convolution with left zero-padding.

    ``x`` is (B, C_in, T) and ``kernel`` (C_out, C_in, K). Output keeps
    length T; position t sees inputs t, t-dilation, ..., t-(K-1)*dilation
    (kernel index K-1 multiplies the current sample).
    """
    x, kernel = as_node(x), as_node(kernel)
    if x.value.ndim != 3 or kernel.value.ndim != 3:
        raise ShapeError("conv1d expects x (B,C,T) and kernel (C_out,C_in,K)")
    batch, c_in, t = x.value.shape
    c_out, c_in_k, k = kernel.value.shape
    if c_in != c_in_k:
        raise ShapeError(f"channel mismatch: x has {c_in}, kernel expects {c_in_k}")
    pad = (k - 1) * dilation
    if pad:
        zeros = constant(np.zeros((batch, c_in, pad)))
        xp = concat([zeros, x], axis=2)
    else:
        xp = x
    idx = np.arange(t)[None, :] + np.arange(k)[:, None] * dilation  # (K, T)
    cols = gather(xp, idx, axis=2)  # (B, C_in, K, T)
    cols = reshape(cols, (batch, c_in * k, t))
    cols = reshape(transpose(cols, (1, 0, 2)), (c_in * k, batch * t))
    flat_kernel = reshape(kernel, (c_out, c_in * k))
    out = matmul(flat_kernel, cols)  # (C_out, B*T)
    out = transpose(reshape(out, (c_out, batch, t)), (1, 0, 2))
    return out


def conv1d_same(x, kernel) -> Node:
    """Zero-padded 'same' 1-D convolution (odd kernel, centered window)."""
    x, kernel = as_node(x), as_node(kernel)
    batch, c_in, t = x.value.shape
    c_out, c_in_k, k = kernel.value.shape
    if c_in != c_in_k:
        raise ShapeError(f"channel mismatch: x has {c_in}, kernel expects {c_in_k}")
    if k % 2 == 0:
        raise ShapeError("conv1d_same expects an odd kernel width")
    half = k // 2
    zeros = np.zeros((batch, c_in, half))
    xp = concat([constant(zeros), x, constant(zeros)], axis=2)
    idx = np.arange(t)[None, :] + np.arange(k)[:, None]  # (K, T) into padded
    cols = gather(xp, idx, axis=2)
    cols = reshape(cols, (batch, c_in * k, t))
    cols = reshape(transpose(cols, (1, 0, 2)), (c_in * k, batch * t))
    out = matmul(reshape(kernel, (c_out, c_in * k)), cols)
    return transpose(reshape(out, (c_out, batch, t)), (1, 0, 2))


# -- backward -------------------------------------------------------------


def _topo(root: Node) -> list[Node]:
    """Parents-before-children order of the subgraph under ``root``."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, leaves: Iterable[Node], create_graph: bool = False) -> dict[Node, Node]:
    """Gradients of a scalar ``loss`` with respect to each leaf.

    Leaves the loss never reaches get explicit zero gradients. With
    ``create_graph`` the returned nodes stay attached to the graph and can
    be differentiated again; otherwise they are detached constants.
    """
    if loss.value.ndim != 0:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    leaves = list(leaves)
    leaf_ids = {id(leaf) for leaf in leaves}

    order = _topo(loss)
    needed: dict[int, bool] = {}
    for node in order:  # parents first, so lookups below are resolved
        needed[id(node)] = id(node) in leaf_ids or any(
            needed.get(id(p), False) for p in node.parents
        )

    grads: dict[int, Node] = {id(loss): constant(np.ones(()))}
    leaf_grads: dict[int, Node] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in leaf_ids:
            acc = leaf_grads.get(id(node))
            leaf_grads[id(node)] = g if acc is None else add(acc, g)
            g = leaf_grads[id(node)]
        for parent, vjp in zip(node.parents, node.vjps):
            if not needed.get(id(parent), False):
                continue
            contrib = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = contrib if acc is None else add(acc, contrib)

    out: dict[Node, Node] = {}
    for leaf in leaves:
        g = leaf_grads.get(id(leaf))
        if g is None:
            g = constant(np.zeros(leaf.value.shape))
        out[leaf] = g.detach() if not create_graph else g
    return out
