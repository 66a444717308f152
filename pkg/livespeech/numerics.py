"""
Reverse-mode automatic differentiation over numpy arrays.

A Node wraps an immutable numpy array (the tensor value) and, when it takes
part in a differentiable computation, the operation that produced it. Calling
backward() on a scalar node walks the recorded graph in reverse topological
order and accumulates gradients into every leaf created with
requires_grad=True.

The operation set is small and tailored to the decoder and its loss: matmul,
add, mul, exp, log, gelu, layer_norm, causal_self_attention,
embedding_lookup, softmax_rows and the fused cross_entropy_rows.
"""

import math
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import NumericsError, ShapeError, ValidationError

LAYER_NORM_EPS = 1e-5

ArrayLike = Union["Node", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def grad_enabled() -> bool:
    """Whether new operations record graph edges in this thread."""
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference paths)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Node:
    """A tensor value plus the graph edge that produced it."""

    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, op: str = "leaf",
                 parents: Tuple["Node", ...] = (), backward: Optional[BackwardFn] = None):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Node":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Node":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Node":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Node":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Node":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Node":
        return mul(other, self)

    def __truediv__(self, other: Union[float, int]) -> "Node":
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Node":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Node":
        return matmul(self, other)


def tensor(data, dtype=None, requires_grad: bool = False) -> Node:
    """Create a leaf node from array-like data."""
    value = np.array(data, dtype=dtype if dtype is not None else np.float64)
    if value.dtype not in (np.float32, np.float64):
        raise ValidationError(f"tensor: unsupported dtype {value.dtype}, expected float32 or float64")
    return Node(value, requires_grad=requires_grad)


def as_node(x: ArrayLike, like: Optional[Node] = None) -> Node:
    """Wrap arrays and scalars as constant nodes."""
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else None
    return Node(np.asarray(x, dtype=dtype))


def stop_gradient(x: ArrayLike) -> Node:
    """Same value as x, contributing no gradient to it."""
    node = as_node(x)
    return Node(node.value, op="stop_gradient")


def _record(value: np.ndarray, op: str, parents: Tuple[Node, ...], backward: BackwardFn) -> Node:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, requires_grad=True, op=op, parents=parents, backward=backward)
    return Node(value, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Node, b: Node):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Node:
    a = as_node(a, b if isinstance(b, Node) else None)
    b = as_node(b, a)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.value + b.value, "add", (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Node:
    a = as_node(a, b if isinstance(b, Node) else None)
    b = as_node(b, a)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.value - b.value, "sub", (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Node:
    a = as_node(a, b if isinstance(b, Node) else None)
    b = as_node(b, a)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _record(a.value * b.value, "mul", (a, b), backward)


def exp(x: Node) -> Node:
    out = np.exp(x.value)

    def backward(g):
        return (g * out,)

    return _record(out, "exp", (x,), backward)


def log(x: Node) -> Node:
    def backward(g):
        return (g / x.value,)

    return _record(np.log(x.value), "log", (x,), backward)


def gelu(x: Node) -> Node:
    """GELU with the tanh approximation used by GPT-style decoders."""
    c = math.sqrt(2.0 / math.pi)
    v = x.value
    inner = c * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = c * (1.0 + 3 * 0.044715 * v ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner
        return (g * local,)

    return _record(out, "gelu", (x,), backward)


# ---------------------------------------------------------------------------
# Reductions and shape operations
# ---------------------------------------------------------------------------

def sum(x: Node, axis: Optional[int] = None, keepdims: bool = False) -> Node:  # noqa: A001
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out, dtype=x.dtype), "sum", (x,), backward)


def mean(x: Node, axis: Optional[int] = None) -> Node:
    count = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / count)


def reshape(x: Node, shape: Tuple[int, ...]) -> Node:
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}")

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(out, "reshape", (x,), backward)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    parts = tuple(as_node(n) for n in nodes)
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]} along axis {axis}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _record(out, "concat", parts, backward)


def take(x: Node, indices: np.ndarray, axis: int = 0) -> Node:
    """Select entries of x along one axis with a 1-D index array (gather)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ShapeError(f"take: indices must be 1-D, got shape {indices.shape}")
    extent = x.shape[axis]
    if indices.size and (indices.min() < 0 or indices.max() >= extent):
        raise ShapeError(f"take: index out of range for axis {axis} of shape {x.shape}")
    out = np.take(x.value, indices, axis=axis)

    def backward(g):
        grad = np.zeros_like(x.value)
        np.add.at(np.moveaxis(grad, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (grad,)

    return _record(out, "take", (x,), backward)


# ---------------------------------------------------------------------------
# Linear algebra and model operations
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Node:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a = as_node(a, b if isinstance(b, Node) else None)
    b = as_node(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast batch axes of {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, "matmul", (a, b), backward)


def embedding_lookup(table: Node, ids: np.ndarray) -> Node:
    """Rows of a (V, d) table for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValidationError(
            f"embedding_lookup: ids must lie in [0, {table.shape[0] - 1}], "
            f"got range [{ids.min()}, {ids.max()}]"
        )
    out = table.value[ids]

    def backward(g):
        grad = np.zeros_like(table.value)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _record(out, "embedding_lookup", (table,), backward)


def layer_norm(x: Node, gain: Optional[Node] = None, bias: Optional[Node] = None,
               eps: float = LAYER_NORM_EPS) -> Node:
    """Normalize over the last axis, then apply the optional affine parameters."""
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: {name} shape {p.shape} does not match feature size {d}")
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat
    if gain is not None:
        out = out * gain.value
    if bias is not None:
        out = out + bias.value

    parents: Tuple[Node, ...] = (x,) + tuple(p for p in (gain, bias) if p is not None)

    def backward(g):
        gxhat = g * gain.value if gain is not None else g
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads: List[np.ndarray] = [gx]
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _record(out.astype(x.dtype, copy=False), "layer_norm", parents, backward)


def softmax_rows(x: Node) -> Node:
    """Softmax over the last axis."""
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, "softmax_rows", (x,), backward)


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax on a plain array (no graph)."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy_rows(logits: Node, targets: np.ndarray, pad_id: Optional[int] = None) -> Node:
    """
    Per-row negative log-likelihood of integer targets under softmax(logits).

    Fused log-softmax + NLL. Rows whose target equals pad_id contribute zero
    loss and zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(
            f"cross_entropy_rows: logits {logits.shape} do not match targets {targets.shape}"
        )
    n_classes = logits.shape[-1]
    pad = targets == pad_id if pad_id is not None else np.zeros(targets.shape, dtype=bool)
    valid = ~pad
    if np.any(valid & ((targets < 0) | (targets >= n_classes))):
        raise ValidationError(
            f"cross_entropy_rows: targets must lie in [0, {n_classes - 1}] or equal the PAD id"
        )
    safe = np.where(valid, targets, 0)

    m = logits.value.max(axis=-1, keepdims=True)
    shifted = logits.value - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - lse
    picked = np.take_along_axis(log_probs, safe[..., None], axis=-1)[..., 0]
    out = np.where(valid, -picked, 0.0).astype(logits.dtype)

    def backward(g):
        probs = np.exp(log_probs)
        one_hot = np.zeros_like(probs)
        np.put_along_axis(one_hot, safe[..., None], 1.0, axis=-1)
        grad = (probs - one_hot) * (g * valid)[..., None]
        return (grad,)

    return _record(out, "cross_entropy_rows", (logits,), backward)


def attention_mask(n_queries: int, n_keys: int, visible_prefix: int = 0, offset: int = 0) -> np.ndarray:
    """Boolean (Tq, Tk) mask: key j visible to query i iff j < prefix or j <= offset + i."""
    i = np.arange(n_queries)[:, None]
    j = np.arange(n_keys)[None, :]
    return (j < visible_prefix) | (j <= offset + i)


def causal_self_attention(q: ArrayLike, k: ArrayLike, v: ArrayLike, n_heads: int,
                          visible_prefix: int = 0, offset: int = 0) -> Node:
    """
    Multi-head scaled dot-product attention with a prefix-visible causal mask.

    q has shape (..., Tq, d); k and v have shape (..., Tk, d). Query i sits at
    absolute position offset + i and sees key j when j < visible_prefix or
    j <= offset + i. Passing visible_prefix = Tk gives unmasked attention.
    """
    q = as_node(q)
    k = as_node(k, q)
    v = as_node(v, q)
    if k.shape != v.shape or q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(
            f"causal_self_attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}"
        )
    d = q.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"causal_self_attention: width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    lead = q.shape[:-2]
    tq, tk = q.shape[-2], k.shape[-2]
    if visible_prefix < tk and offset + tq > tk:
        raise ShapeError(f"causal_self_attention: {tq} queries at offset {offset} exceed {tk} keys")
    scale = 1.0 / math.sqrt(hd)

    qh = q.value.reshape(*lead, tq, n_heads, hd)
    kh = k.value.reshape(*lead, tk, n_heads, hd)
    vh = v.value.reshape(*lead, tk, n_heads, hd)
    mask = attention_mask(tq, tk, visible_prefix, offset)
    scores = np.einsum("...ihd,...jhd->...hij", qh, kh) * scale
    scores = np.where(mask, scores, -np.inf)
    probs = softmax_array(scores, axis=-1)
    out = np.einsum("...hij,...jhd->...ihd", probs, vh).reshape(*lead, tq, d)

    def backward(g):
        gh = g.reshape(*lead, tq, n_heads, hd)
        d_probs = np.einsum("...ihd,...jhd->...hij", gh, vh)
        gv = np.einsum("...hij,...ihd->...jhd", probs, gh)
        d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True)) * scale
        gq = np.einsum("...hij,...jhd->...ihd", d_scores, kh)
        gk = np.einsum("...hij,...ihd->...jhd", d_scores, qh)
        return (
            gq.reshape(q.shape),
            gk.reshape(k.shape),
            gv.reshape(v.shape),
        )

    return _record(out.astype(q.dtype, copy=False), "causal_self_attention", (q, k, v), backward)


# ---------------------------------------------------------------------------
# Gradient computation
# ---------------------------------------------------------------------------

def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node) -> Dict[Node, np.ndarray]:
    """
    Accumulate d(root)/d(leaf) into leaf.grad for every requires_grad leaf.

    Returns a mapping from each reached leaf to its accumulated gradient.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    leaves: Dict[Node, np.ndarray] = {}
    if not root.requires_grad:
        return leaves

    pending: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return leaves


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6,
                         indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Central-difference estimate of df/dx.

    Perturbs every coordinate of x, or only the flat indices given; skipped
    coordinates are left as zero. x itself is restored after every perturbation.
    """
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = range(x.size) if indices is None else indices
    bad: List[int] = []
    for i in flat:
        # index x itself; a reshape of a strided view would be a copy
        idx = np.unravel_index(int(i), x.shape)
        original = x[idx]
        x[idx] = original + eps
        f_plus = float(f(x))
        x[idx] = original - eps
        f_minus = float(f(x))
        x[idx] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            bad.append(int(i))
            continue
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    if bad:
        coords = [np.unravel_index(i, x.shape) for i in bad[:10]]
        raise NumericsError(
            f"finite_diff_gradient: non-finite function value at {len(bad)} coordinate(s), "
            f"first: {coords}"
        )
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Largest elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
