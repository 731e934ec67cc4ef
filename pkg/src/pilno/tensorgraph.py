"""Reverse-mode differentiation over dense float64 arrays.

Every op returns a :class:`Node`. A node may additionally carry *tangents*:
forward-mode derivatives with respect to a few seeded input coordinates. The
tangents are themselves ordinary nodes of the same graph, so a single reverse
pass differentiates losses built from input derivatives (physics residuals)
with respect to the parameters.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in the graph. ``op`` names the first offender."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite values produced by op '{op}' during {where} pass")
        self.op = op
        self.where = where


class GraphError(ValueError):
    pass


class _Flags:
    grad_enabled = True
    tangents_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build values only; nothing is recorded for the reverse pass."""
    prev = _Flags.grad_enabled
    _Flags.grad_enabled = False
    try:
        yield
    finally:
        _Flags.grad_enabled = prev


@contextlib.contextmanager
def no_tangents():
    """Stop forward-mode propagation; values and the reverse pass are unaffected."""
    prev = _Flags.tangents_enabled
    _Flags.tangents_enabled = False
    try:
        yield
    finally:
        _Flags.tangents_enabled = prev


class Node:
    """A value in the differentiation graph."""

    __slots__ = ("value", "op", "parents", "vjp", "requires_grad", "tangents", "seeded")
    __array_priority__ = 1000

    def __init__(self, value, op="leaf", parents=(), vjp=None, requires_grad=False):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.tangents: list[Node | None] | None = None
        self.seeded: tuple[int, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

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

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a Node is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        if not isinstance(k, int) or k < 1:
            raise TypeError("only positive integer powers are supported")
        if k == 1:
            return self
        if k == 2:
            return square(self)
        return mul(self ** (k - 1), self)


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=np.float64))


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def leaf(array, requires_grad: bool = True) -> Node:
    return Node(np.asarray(array, dtype=np.float64), requires_grad=requires_grad)


def const(array) -> Node:
    return Node(np.asarray(array, dtype=np.float64))


def _make(val: np.ndarray, op: str, parents: tuple, vjp) -> Node:
    # a sum is NaN/Inf iff some entry is (barring overflow near 1e308)
    if not math.isfinite(np.add.reduce(val, axis=None)):
        raise NonFiniteError(op)
    rg = _Flags.grad_enabled and any(p.requires_grad for p in parents)
    if rg:
        return Node(val, op, parents, vjp, True)
    return Node(val, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- tangent plumbing ------------------------------------------------------


def _n_dirs(*nodes: Node) -> int:
    if not _Flags.tangents_enabled:
        return 0
    for n in nodes:
        if n.tangents is not None:
            return len(n.tangents)
    return 0


def _tan(n: Node, k: int) -> Node | None:
    return None if n.tangents is None else n.tangents[k]


def _is_zero(n: Node | None) -> bool:
    return n is None or (not n.requires_grad and n.tangents is None and not n.value.any())


def _set_tangents(out: Node, tans: list[Node | None]) -> Node:
    shape = out.value.shape
    with no_tangents():
        tans = [None if _is_zero(t) else t if t.value.shape == shape else broadcast_to(t, shape)
                for t in tans]
    out.tangents = tans if any(t is not None for t in tans) else None
    return out


def _tadd(a: Node | None, b: Node | None) -> Node | None:
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _tmul(a: Node | None, b: Node | None) -> Node | None:
    if a is None or b is None:
        return None
    return mul(a, b)


def _unary_tangent(out: Node, x: Node, factor) -> Node:
    """Attach d(out) = factor() * dx, with ``factor`` building a node lazily."""
    k = _n_dirs(x)
    if k:
        with no_tangents():
            f = None
            tans = []
            for i in range(k):
                t = _tan(x, i)
                if t is None:
                    tans.append(None)
                    continue
                if f is None:
                    f = factor()
                tans.append(mul(f, t))
        _set_tangents(out, tans)
    return out


# --- elementwise ops -------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    out = _make(a.value + b.value, "add", (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    k = _n_dirs(a, b)
    if k:
        with no_tangents():
            _set_tangents(out, [_tadd(_tan(a, i), _tan(b, i)) for i in range(k)])
    return out


def neg(a) -> Node:
    a = as_node(a)
    out = _make(-a.value, "neg", (a,), lambda g: (-g,))
    k = _n_dirs(a)
    if k:
        with no_tangents():
            _set_tangents(out, [None if _tan(a, i) is None else neg(_tan(a, i)) for i in range(k)])
    return out


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    out = _make(a.value - b.value, "sub", (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
    k = _n_dirs(a, b)
    if k:
        with no_tangents():
            tans = []
            for i in range(k):
                ta, tb = _tan(a, i), _tan(b, i)
                if tb is None:
                    tans.append(ta)
                elif ta is None:
                    tans.append(neg(tb))
                else:
                    tans.append(sub(ta, tb))
            _set_tangents(out, tans)
    return out


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = _make(av * bv, "mul", (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))
    k = _n_dirs(a, b)
    if k:
        with no_tangents():
            _set_tangents(out, [_tadd(_tmul(_tan(a, i), b), _tmul(a, _tan(b, i))) for i in range(k)])
    return out


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    out = _make(av * av, "square", (a,), lambda g: (2.0 * g * av,))
    return _unary_tangent(out, a, lambda: mul(a, 2.0))


def exp(a) -> Node:
    a = as_node(a)
    y = np.exp(a.value)
    out = _make(y, "exp", (a,), lambda g: (g * y,))
    return _unary_tangent(out, a, lambda: exp(a))


def cos(a) -> Node:
    a = as_node(a)
    av = a.value
    out = _make(np.cos(av), "cos", (a,), lambda g: (-g * np.sin(av),))
    return _unary_tangent(out, a, lambda: neg(sin(a)))


def sin(a) -> Node:
    a = as_node(a)
    av = a.value
    out = _make(np.sin(av), "sin", (a,), lambda g: (g * np.cos(av),))
    return _unary_tangent(out, a, lambda: cos(a))


def rsqrt(a) -> Node:
    a = as_node(a)
    y = 1.0 / np.sqrt(a.value)
    out = _make(y, "rsqrt", (a,), lambda g: (-0.5 * g * y ** 3,))
    return _unary_tangent(out, a, lambda: mul(rsqrt(a) ** 3, -0.5))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    out = _make(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))
    return _unary_tangent(out, a, lambda: const(mask.astype(np.float64)))


def clamp_max(a, limit: float) -> Node:
    """min(a, limit); the derivative is zero where the clamp is active."""
    a = as_node(a)
    mask = a.value < limit
    out = _make(np.minimum(a.value, limit), "clamp", (a,), lambda g: (g * mask,))
    return _unary_tangent(out, a, lambda: const(mask.astype(np.float64)))


def _std_normal_pdf(x: np.ndarray) -> np.ndarray:
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(a) -> Node:
    """x * Phi(x) with the exact normal CDF."""
    a = as_node(a)
    x = a.value
    cdf = ndtr(x)
    out = _make(x * cdf, "gelu", (a,), lambda g: (g * (cdf + x * _std_normal_pdf(x)),))
    return _unary_tangent(out, a, lambda: gelu_prime(a))


def gelu_prime(a) -> Node:
    """d gelu / dx = Phi(x) + x phi(x); needed by tangent rules."""
    a = as_node(a)
    x = a.value
    pdf = _std_normal_pdf(x)
    out = _make(ndtr(x) + x * pdf, "gelu_prime", (a,), lambda g: (g * pdf * (2.0 - x * x),))
    return _unary_tangent(out, a, lambda: _gelu_second(a))


def _gelu_second(a: Node) -> Node:
    # value-only: third derivatives are never needed
    x = a.value
    return const(_std_normal_pdf(x) * (2.0 - x * x))


# --- structural ops --------------------------------------------------------


def matmul(a, w) -> Node:
    """(..., k) @ (k, n) -> (..., n)."""
    a, w = as_node(a), as_node(w)
    av, wv = a.value, w.value
    if wv.ndim != 2 or av.shape[-1] != wv.shape[0]:
        raise GraphError(f"matmul shape mismatch: {av.shape} @ {wv.shape}")

    def vjp(g):
        ga = g @ wv.T
        gw = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw

    out = _make(av @ wv, "matmul", (a, w), vjp)
    k = _n_dirs(a, w)
    if k:
        with no_tangents():
            tans = []
            for i in range(k):
                ta, tw = _tan(a, i), _tan(w, i)
                tans.append(_tadd(None if ta is None else matmul(ta, w),
                                  None if tw is None else matmul(a, tw)))
            _set_tangents(out, tans)
    return out


def mean(a, axis: int | None = None, keepdims: bool = False) -> Node:
    a = as_node(a)
    av = a.value
    shape = av.shape
    n = av.size if axis is None else shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    out = _make(np.asarray(av.mean(axis=axis, keepdims=keepdims)), "mean", (a,), vjp)
    k = _n_dirs(a)
    if k:
        with no_tangents():
            _set_tangents(out, [None if _tan(a, i) is None else mean(_tan(a, i), axis, keepdims)
                                for i in range(k)])
    return out


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    vals = [n.value for n in nodes]
    ax = axis % vals[0].ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def vjp(g):
        pre = (slice(None),) * ax
        return tuple(g[pre + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(vals)))

    out = _make(np.concatenate(vals, axis=ax), "concat", tuple(nodes), vjp)
    k = _n_dirs(*nodes)
    if k:
        with no_tangents():
            tans = []
            for i in range(k):
                parts = [_tan(n, i) for n in nodes]
                if all(p is None for p in parts):
                    tans.append(None)
                else:
                    tans.append(concat([const(np.zeros_like(n.value)) if p is None else p
                                        for n, p in zip(nodes, parts)], axis=ax))
            _set_tangents(out, tans)
    return out


def take(a, index: int, keepdims: bool = True) -> Node:
    """Slice one entry of the last axis."""
    a = as_node(a)
    shape = a.value.shape
    if not -shape[-1] <= index < shape[-1]:
        raise IndexError(f"index {index} out of range for trailing axis of size {shape[-1]}")
    index %= shape[-1]
    sl = slice(index, index + 1) if keepdims else index

    def vjp(g):
        full = np.zeros(shape)
        full[..., sl] = g
        return (full,)

    out = _make(a.value[..., sl], "slice", (a,), vjp)
    k = _n_dirs(a)
    if k:
        with no_tangents():
            _set_tangents(out, [None if _tan(a, i) is None else take(_tan(a, i), index, keepdims)
                                for i in range(k)])
    return out


def broadcast_to(a, shape: tuple[int, ...]) -> Node:
    a = as_node(a)
    src = a.value.shape
    out = _make(np.broadcast_to(a.value, shape).copy(), "broadcast", (a,),
                lambda g: (_unbroadcast(g, src),))
    k = _n_dirs(a)
    if k:
        with no_tangents():
            _set_tangents(out, [None if _tan(a, i) is None else broadcast_to(_tan(a, i), shape)
                                for i in range(k)])
    return out


def layer_norm(v, eps: float = 1e-5) -> Node:
    """Normalize over the trailing (feature) axis: (v - mean) / sqrt(var + eps)."""
    v = as_node(v)
    if not (_Flags.grad_enabled and v.requires_grad) and not _n_dirs(v):
        # inference path: same arithmetic as below, without the intermediate nodes
        x = v.value
        c = x - x.mean(axis=-1, keepdims=True)
        return _make(c * (1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)), "layer_norm", (v,), None)
    centered = sub(v, mean(v, axis=-1, keepdims=True))
    var = mean(square(centered), axis=-1, keepdims=True)
    return mul(centered, rsqrt(add(var, eps)))


# --- reverse pass ----------------------------------------------------------


def _topo_order(root: Node) -> list[Node]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(loss: Node, wrt: Iterable[Node]) -> list[np.ndarray]:
    """Exact d loss / d w for each ``w``; zeros for nodes outside the graph."""
    wrt = list(wrt)
    if loss.value.size != 1:
        raise GraphError(f"gradients() needs a scalar loss, got shape {loss.value.shape}")
    want = {id(w) for w in wrt}
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node)) if id(node) in want else grads.pop(id(node), None)
            if g is None or node.vjp is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                if not math.isfinite(np.add.reduce(gp, axis=None)):
                    raise NonFiniteError(node.op, "backward")
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp
    return [np.array(grads[id(w)]) if id(w) in grads else np.zeros_like(w.value) for w in wrt]


# --- input coordinates -----------------------------------------------------


def seed_coordinates(coords, dims: Sequence[int], requires_grad: bool = False) -> Node:
    """Leaf holding input coordinates with unit tangents along ``dims`` of the last axis."""
    node = leaf(coords, requires_grad=requires_grad)
    width = node.value.shape[-1]
    tans = []
    for d in dims:
        if not 0 <= d < width:
            raise IndexError(f"coordinate index {d} out of range for {width} inputs")
        e = np.zeros(node.value.shape)
        e[..., d] = 1.0
        tans.append(const(e))
    node.tangents = tans
    node.seeded = tuple(dims)
    return node


def input_jacobian(output: Node, coords: Node, coord: int, component: int | None = None,
                   span: tuple[float, float] | None = None) -> Node:
    """Pointwise d output[component] / d coordinate.

    ``coords`` must come from :func:`seed_coordinates`. When the coordinate was
    min-max mapped to [-1, 1], pass its physical ``span=(min, max)`` to get the
    derivative with respect to the physical coordinate.
    """
    if coord not in coords.seeded:
        raise IndexError(f"coordinate {coord} was not seeded (seeded: {coords.seeded})")
    slot = coords.seeded.index(coord)
    if output.tangents is None or output.tangents[slot] is None:
        d = const(np.zeros(output.value.shape))
    else:
        d = output.tangents[slot]
    if component is not None:
        d = take(d, component)
    if span is not None:
        lo, hi = span
        d = mul(d, 2.0 / (hi - lo))
    return d
