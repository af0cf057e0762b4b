"""Dense tensors with tape-based reverse-mode differentiation.

Values are numpy arrays, float64 by default (float32 is available for speed
runs via the ``dtype`` arguments). Every differentiable op records a backward
closure on the result node; ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates gradients into ``.grad``. Nodes are
only linked into the graph when at least one input has ``requires_grad=True``,
so constants and frozen parameters cost nothing at backward time.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform; message names the op and the shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        pretty = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {pretty}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class FlopCounter:
    """Accumulates a matmul-dominated FLOP estimate (2*m*n*k per product)."""

    __slots__ = ("total",)

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


_ACTIVE_COUNTERS: list[FlopCounter] = []
_GRAD_ENABLED = True


@contextmanager
def count_flops():
    """Context manager yielding a FlopCounter fed by ops run inside it."""
    counter = FlopCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.remove(counter)


@contextmanager
def no_grad():
    """Skip tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _add_flops(n):
    if _ACTIVE_COUNTERS:
        for c in _ACTIVE_COUNTERS:
            c.total += int(n)


class Tensor:
    """A numpy array plus the tape bookkeeping needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- graph ---------------------------------------------------------
    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar loss; fills ``.grad`` fields."""
        if self.data.size != 1:
            raise ShapeError("backward", self.shape, detail="loss must be scalar")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
        # drop tape links once used: the closures reference their own output
        # node, so intact graphs are reference cycles that pile up across
        # training steps faster than the cycle collector reclaims them
        for node in order:
            node._parents = ()
            node._backward = None

    def zero_grad(self):
        self.grad = None

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, _neg_like(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("tensor/tensor division is not supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _neg_like(x, like):
    if isinstance(x, (int, float)):
        return Tensor(np.asarray(-x, dtype=like.data.dtype))
    return scale(_wrap(x, like), -1.0)


def _link(out: Tensor, parents, backward):
    """Attach tape state to ``out`` if any parent participates in autodiff."""
    if not _GRAD_ENABLED:
        return out
    tracked = tuple(p for p in parents if p.requires_grad)
    if tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    out = Tensor(data)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _link(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    out = Tensor(data)

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _link(out, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data * s)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * s)

    return _link(out, (a,), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0.0))

    return _link(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - y * y))

    return _link(out, (a,), backward)


# -- linear algebra ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="operands must be >= 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    out = Tensor(data)
    _add_flops(2 * data.size // data.shape[-1] * a.shape[-1] * data.shape[-1])

    def backward():
        g = out.grad
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        if a.requires_grad:
            ga = np.matmul(g, bt)
            _add_flops(2 * ga.size // ga.shape[-1] * g.shape[-1] * ga.shape[-1])
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(at, g)
            _add_flops(2 * gb.size // gb.shape[-1] * at.shape[-1] * gb.shape[-1])
            b._accumulate(_unbroadcast(gb, b.shape))

    return _link(out, (a, b), backward)


# -- reductions and shaping --------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward():
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _link(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def backward():
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape) / count)

    return _link(out, (a,), backward)


# Row pooling used by the fusion block: average over a given axis.
avg_pool = mean


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    return _link(out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.transpose(axes))
    inv = np.argsort(axes)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.transpose(inv))

    return _link(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    out = Tensor(data)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _link(out, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack", *[t.shape for t in tensors])
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def backward():
        g = out.grad
        for k, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, k, axis=axis))

    return _link(out, tuple(tensors), backward)


def index(a, key) -> Tensor:
    """Basic slicing/indexing; gradient scatters back into the source."""
    a = _wrap(a)
    out = Tensor(a.data[key])

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, key, out.grad)
            a._accumulate(g)

    return _link(out, (a,), backward)


def gather_rows(table, idx) -> Tensor:
    """Pick rows ``table[idx]`` for an integer array ``idx`` of any shape."""
    table = _wrap(table)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_rows: idx must be an integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather_rows", table.shape, idx.shape, detail="index out of range")
    out = Tensor(table.data[idx])

    def backward():
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, idx, out.grad)
            table._accumulate(g)

    return _link(out, (table,), backward)


# -- normalization and attention pieces ----------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    _add_flops(5 * a.size)

    def backward():
        if a.requires_grad:
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))

    return _link(out, (a,), backward)


def layernorm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis with affine (gamma, beta)."""
    a = _wrap(a)
    gamma = _wrap(gamma, a)
    beta = _wrap(beta, a)
    dim = a.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError("layernorm", a.shape, gamma.shape, beta.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    _add_flops(8 * a.size)

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, dim).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, dim).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            term1 = gx
            term2 = gx.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (term1 - term2 - term3))

    return _link(out, (a, gamma, beta), backward)


def cross_entropy(logits, targets, mask=None, denom: float | None = None) -> Tensor:
    """Masked token NLL: sum over positions of -log p(target), divided by ``denom``.

    ``logits`` has shape (..., V); ``targets`` is an integer array over the
    leading shape; ``mask`` (same leading shape) weights each position and
    defaults to all-ones. ``denom`` defaults to the leading batch size so the
    result is a per-example sum averaged over the batch.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets)
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    if mask is None:
        mask_arr = np.ones(lead, dtype=logits.data.dtype)
    else:
        mask_arr = np.asarray(mask, dtype=logits.data.dtype)
        if mask_arr.shape != lead:
            raise ShapeError("cross_entropy", logits.shape, mask_arr.shape)
    if denom is None:
        denom = float(lead[0]) if lead else 1.0
    x = logits.data
    xmax = x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x - xmax).sum(axis=-1, keepdims=True)) + xmax
    picked = np.take_along_axis(x, targets[..., None], axis=-1)
    nll = (lse - picked)[..., 0]
    out = Tensor(np.asarray((nll * mask_arr).sum() / denom))
    _add_flops(5 * logits.size)

    def backward():
        if not logits.requires_grad:
            return
        p = np.exp(x - lse)
        np.subtract.at(p, (*np.indices(lead), targets), 1.0)
        g = p * mask_arr[..., None] * (out.grad / denom)
        logits._accumulate(g)

    return _link(out, (logits,), backward)
