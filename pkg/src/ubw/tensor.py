"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records a node on the dynamic graph (the "tape") when one of
its inputs requires a gradient.  Backward rules are themselves written with
``Tensor`` primitives, so running a backward pass with ``create_graph=True``
records a second graph that can be differentiated again.  This is what the
gradient-matching objective needs: a cosine between parameter gradients,
differentiated with respect to input perturbations.

Conventions:
    * elements are always ``numpy.float64``, row-major, no views are exposed;
    * broadcasting follows numpy; gradients are summed back to input shapes;
    * ``log`` refuses non-positive input; guarded logs live in the loss code.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BackwardError, DomainError, HigherOrderError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "grad",
    "grad_of_grad",
    "conv2d",
    "maxpool2d",
    "softmax",
    "log_softmax",
    "relu",
    "exp",
    "log",
    "sqrt",
    "clamp",
    "matmul",
    "where_mask",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded primitive: its inputs and how to pull a gradient back."""

    __slots__ = ("op", "parents", "backward_fn", "released")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.released = False


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _lift(value) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff.

    Args:
        data: anything ``numpy.array`` accepts; copied and cast to float64.
        requires_grad: mark the tensor as a leaf whose gradient is wanted.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "_first_order")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._node: Node | None = None
        self._first_order = False

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._node = None
        out._first_order = self._first_order
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar --------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def sum_to(self, shape):
        return sum_to(self, shape)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    # -- autodiff entry point --------------------------------------------
    def backward(self, create_graph: bool = False, retain_graph: bool | None = None):
        """Accumulate ``d self / d leaf`` into ``leaf.grad`` for every leaf.

        The graph is released afterwards unless ``retain_graph`` (defaults to
        ``create_graph``); a second call on a released graph raises
        :class:`BackwardError`.
        """
        if self.data.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._node is None:
            raise BackwardError("backward on a tensor with an empty tape")
        if retain_graph is None:
            retain_graph = create_graph
        grads, order = _run_backward(
            [self], [Tensor(np.ones_like(self.data))], create_graph
        )
        for t in _leaves(order):
            g = grads.get(id(t))
            if g is None:
                continue
            if not create_graph:
                g = g.detach()
                g._first_order = True
            t.grad = g if t.grad is None else add(t.grad, g)
        if not retain_graph:
            _release(order)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._first_order = any(p._first_order for p in parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward_fn)
    else:
        out.requires_grad = False
        out._node = None
    return out


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topo_order(roots: Sequence[Tensor]) -> list[Tensor]:
    """Tensors reachable from ``roots``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(r, False) for r in roots if r._node is not None]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def _leaves(order: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in order if t._node is None and t.requires_grad]


def _release(order):
    for t in order:
        if t._node is not None:
            t._node.released = True


def _run_backward(roots, seeds, create_graph):
    order = _topo_order(roots)
    for t in order:
        if t._node is not None and t._node.released:
            raise BackwardError(
                "graph already released by a previous backward; rebuild it or "
                "pass retain_graph=True"
            )
    grads: dict[int, Tensor] = {}
    for r, s in zip(roots, seeds):
        if r.shape != s.shape:
            raise ShapeError("backward seed", r.shape, s.shape)
        prev = grads.get(id(r))
        grads[id(r)] = s if prev is None else add(prev, s)
    with _grad_mode(create_graph):
        for t in reversed(order):
            node = t._node
            g = grads.get(id(t))
            if node is None or g is None:
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    return grads, order


def grad(
    outputs,
    inputs,
    grad_outputs=None,
    create_graph: bool = False,
    retain_graph: bool | None = None,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Functional gradient: ``d sum(outputs * grad_outputs) / d inputs``.

    With ``create_graph=True`` the returned gradients carry their own graph
    and may be differentiated again (higher-order mode).  Otherwise they are
    detached constants flagged as first-order results.
    """
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_outputs is None:
        for o in outputs:
            if o.data.size != 1:
                raise BackwardError(
                    f"grad_outputs required for non-scalar output of shape {o.shape}"
                )
        grad_outputs = [Tensor(np.ones_like(o.data)) for o in outputs]
    else:
        grad_outputs = [_lift(g) for g in grad_outputs]
    live = [(o, g) for o, g in zip(outputs, grad_outputs) if o.requires_grad]
    if retain_graph is None:
        retain_graph = create_graph
    if live:
        grads, order = _run_backward([o for o, _ in live], [g for _, g in live], create_graph)
    else:
        grads, order = {}, []
    result = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            if not allow_unused:
                raise BackwardError(
                    "an input is not reachable from the outputs; pass allow_unused=True"
                )
            g = Tensor(np.zeros_like(x.data))
        if not create_graph:
            g = g.detach()
            g._first_order = True
        result.append(g)
    if not retain_graph:
        _release(order)
    return result


def grad_of_grad(objective: Tensor, wrt: Tensor) -> Tensor:
    """Differentiate a scalar built from first-order gradients.

    The first-order gradients must have been produced with
    ``grad(..., create_graph=True)``; otherwise the objective carries no
    second-order graph and :class:`HigherOrderError` is raised.  An objective
    that does not depend on ``wrt`` yields a zero tensor.
    """
    if objective._first_order:
        raise HigherOrderError(
            "objective was built from gradients recorded in first-order mode; "
            "recompute them with grad(..., create_graph=True)"
        )
    if objective.data.size != 1:
        raise BackwardError(f"objective must be scalar, got shape {objective.shape}")
    return grad(objective, wrt, allow_unused=True)[0]


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return sum_to(g, a.shape), neg(sum_to(g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")

    def backward(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power: exponent must be a Python number")
    p = float(exponent)
    if p != int(p) and np.any(a.data < 0):
        raise DomainError("power: fractional exponent of a negative value")

    def backward(g):
        if p == 0:
            return (None,)
        return (mul(g, mul(p, power(a, p - 1))),)

    return _make(np.power(a.data, p), (a,), backward, "pow")


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)
    holder = {}

    def backward(g):
        return (mul(g, holder["out"]),)

    out = _make(out_data, (a,), backward, "exp")
    holder["out"] = out
    return out


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        bad = float(a.data[a.data <= 0].flat[0])
        raise DomainError(f"log: non-positive input ({bad!r})")
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    holder = {}

    def backward(g):
        return (div(mul(g, 0.5), holder["out"]),)

    out = _make(np.sqrt(a.data), (a,), backward, "sqrt")
    holder["out"] = out
    return out


def where_mask(a, mask: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 mask (no gradient flows into the mask)."""
    return mul(a, Tensor(mask.astype(np.float64)))


def relu(a) -> Tensor:
    a = _lift(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(a.data * mask.data, (a,), lambda g: (mul(g, mask),), "relu")


def clamp(a, lo=None, hi=None) -> Tensor:
    a = _lift(a)
    if lo is not None and hi is not None and lo > hi:
        raise DomainError(f"clamp: lower bound {lo} above upper bound {hi}")
    data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data)
    if lo is not None:
        inside[a.data < lo] = 0.0
    if hi is not None:
        inside[a.data > hi] = 0.0
    mask = Tensor(inside)
    return _make(data, (a,), lambda g: (mul(g, mask),), "clamp")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (broadcast_to(reshape(g, kept), shape),)

    data = np.sum(a.data, axis=axes, keepdims=keepdims)
    return _make(np.asarray(data, dtype=np.float64), (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeError("mean", a.shape, detail="empty reduction")
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    orig = a.shape
    return _make(data, (a,), lambda g: (reshape(g, orig),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(data, (a,), lambda g: (transpose(g, inverse),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.array(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    orig = a.shape
    return _make(data, (a,), lambda g: (sum_to(g, orig),), "broadcast_to")


def sum_to(a, shape) -> Tensor:
    """Sum ``a`` down to ``shape`` (inverse of numpy broadcasting)."""
    a = _lift(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError("sum_to", a.shape, shape)
    axes = list(range(lead))
    for i, n in enumerate(shape):
        if n == 1 and a.shape[lead + i] != 1:
            axes.append(lead + i)
        elif n != a.shape[lead + i]:
            raise ShapeError("sum_to", a.shape, shape)
    data = np.sum(a.data, axis=tuple(axes), keepdims=True)
    data = data.reshape(shape)
    orig = a.shape
    return _make(data, (a,), lambda g: (broadcast_to(g, orig),), "sum_to")


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="need (n,k) @ (k,m)")

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items
    )


def getitem(a, index) -> Tensor:
    a = _lift(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    data = np.array(a.data[index], dtype=np.float64)
    orig = a.shape
    return _make(data, (a,), lambda g: (_embed(g, orig, index),), "getitem")


def _embed(g, shape, index) -> Tensor:
    """Place ``g`` at ``index`` inside zeros of ``shape`` (adjoint of getitem)."""
    g = _lift(g)
    data = np.zeros(shape, dtype=np.float64)
    if _is_basic_index(index):
        data[index] += g.data
    else:
        np.add.at(data, index, g.data)
    return _make(data, (g,), lambda gg: (getitem(gg, index),), "embed")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    ax = axis % data.ndim

    def backward(g):
        parts = []
        start = 0
        for t in tensors:
            stop = start + t.shape[ax]
            idx = tuple([slice(None)] * ax + [slice(start, stop)])
            parts.append(getitem(g, idx))
            start = stop
        return tuple(parts)

    return _make(data, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# composite layers
# ---------------------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Row softmax; the max shift is a constant so gradients are exact."""
    x = _lift(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    z = sub(x, Tensor(np.max(x.data, axis=axis, keepdims=True)))
    return sub(z, log(tsum(exp(z), axis=axis, keepdims=True)))


def _unfold(x: Tensor, kh: int, kw: int) -> Tensor:
    """im2col: (N,C,H,W) -> (N*Ho*Wo, C*kh*kw) for a valid, stride-1 window."""
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    shape = x.shape
    return _make(
        np.ascontiguousarray(cols), (x,), lambda g: (_fold(g, shape, kh, kw),), "unfold"
    )


def _fold(cols: Tensor, shape, kh: int, kw: int) -> Tensor:
    """col2im, the adjoint of :func:`_unfold` (overlaps are summed)."""
    n, c, h, w = shape
    ho, wo = h - kh + 1, w - kw + 1
    g6 = cols.data.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros(shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho, j : j + wo] += g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return _make(out, (cols,), lambda g: (_unfold(g, kh, kw),), "fold")


def conv2d(x, weight, bias=None) -> Tensor:
    """Valid 2-D cross-correlation with stride 1.

    Args:
        x: input batch ``(N, C, H, W)``.
        weight: kernels ``(F, C, kh, kw)``.
        bias: optional ``(F,)``.

    Returns:
        ``(N, F, H-kh+1, W-kw+1)``.
    """
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="need 4-D input and kernel")
    n, c, h, w = x.shape
    f, ck, kh, kw = weight.shape
    if ck != c or kh > h or kw > w:
        raise ShapeError("conv2d", x.shape, weight.shape)
    ho, wo = h - kh + 1, w - kw + 1
    cols = _unfold(x, kh, kw)
    out = matmul(cols, transpose(reshape(weight, (f, c * kh * kw))))
    if bias is not None:
        out = add(out, bias)
    return transpose(reshape(out, (n, ho, wo, f)), (0, 3, 1, 2))


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties go to the first element of the window in row-major order.
    """
    x = _lift(x)
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError("maxpool2d", x.shape, (size, size))
    if (h, w) != (ho * size, wo * size):
        x = getitem(x, (slice(None), slice(None), slice(0, ho * size), slice(0, wo * size)))
    blocks = transpose(reshape(x, (n, c, ho, size, wo, size)), (0, 1, 2, 4, 3, 5))
    blocks = reshape(blocks, (n, c, ho, wo, size * size))
    first = np.argmax(blocks.data, axis=-1)
    mask = np.zeros(blocks.shape)
    np.put_along_axis(mask, first[..., None], 1.0, axis=-1)
    return tsum(mul(blocks, Tensor(mask)), axis=-1)


def flatten_params(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (-1,)) for t in tensors], axis=0)


def numerical_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5):
    """Central finite differences of a scalar function (test/oracle helper)."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    res = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        res[i] = (hi - lo) / (2 * step)
    return out
