"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a node to a dynamically built DAG.
Nodes record op name, the buffers retained for the backward pass, and the
cumulative wall time spent in their backward function, so a finished graph
can be inspected for size, per-op backward cost, and saved-tensor memory.

Conventions:
  * dtypes are "single" (float32) or "double" (float64); helpers accept
    either the string or the numpy dtype.
  * graph construction and backward execution are single-threaded per
    graph; tensors must not be shared mutably between threads.
  * in-place ops (`add_at`) mutate the underlying buffer; the input tensor
    must not be read again after the call (the returned tensor supersedes
    it).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DomainError, GraphError, ShapeError, SingularMatrixError

DTYPES = {"single": np.float32, "double": np.float64}

_grad_enabled = True
_debug_checks = False
_deterministic = False


def resolve_dtype(dtype):
    """Map "single"/"double" (or a numpy dtype) to a numpy dtype."""
    if isinstance(dtype, str):
        try:
            return DTYPES[dtype]
        except KeyError:
            raise ValueError(f"unknown dtype {dtype!r}, expected 'single' or 'double'")
    return np.dtype(dtype).type


class grad_enabled:
    """Context manager switching graph construction on or off.

    Nestable; the innermost setting wins. With construction off, forward
    values are bitwise identical to the enabled mode.
    """

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = self.enabled
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def no_grad():
    return grad_enabled(False)


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_debug_checks(enabled: bool):
    """Enable extra domain validation (log positivity, division by zero)."""
    global _debug_checks
    _debug_checks = enabled


def set_deterministic(enabled: bool):
    """Record the determinism request.

    All kernels run through sequential numpy reductions, which are already
    deterministic for a fixed BLAS thread count; the flag is recorded so
    drivers can report the guarantee and future parallel kernels can honor
    it.
    """
    global _deterministic
    _deterministic = enabled


def is_deterministic() -> bool:
    return _deterministic


class GraphNode:
    """One recorded operation: backward function plus retained buffers."""

    __slots__ = ("op_name", "inputs", "saved", "backward_fn", "backward_time")

    def __init__(self, op_name, inputs, saved, backward_fn):
        self.op_name = op_name
        self.inputs = inputs          # input Tensors, aligned with backward_fn output
        self.saved = saved            # list of ndarrays retained for backward
        self.backward_fn = backward_fn
        self.backward_time = 0.0


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "grad")

    def __init__(self, data, dtype=None, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        dt = resolve_dtype(dtype) if dtype is not None else None
        self.data = np.asarray(data, dtype=dt)
        if self.data.dtype not in (np.float32, np.float64, np.bool_):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.grad = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def numpy(self):
        """The raw buffer (no copy); treat as read-only."""
        return self.data

    def detach(self):
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.node = None
        t.grad = None
        return t

    def copy(self):
        return Tensor(self.data.copy())

    def astype(self, dtype):
        return Tensor(self.data.astype(resolve_dtype(dtype)))

    def requires_grad_(self, flag=True):
        if self.node is not None:
            raise GraphError("cannot toggle requires_grad on a non-leaf tensor")
        self.requires_grad = flag
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar ------------------------------------------------------

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axes=None, keepdims=False):
        return sum_(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return mean(self, axes, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dt = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dt))


def parameter(data, dtype="double"):
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, dtype=dtype, requires_grad=True)


def zeros(shape, dtype="double"):
    return Tensor(np.zeros(shape, dtype=resolve_dtype(dtype)))


def ones(shape, dtype="double"):
    return Tensor(np.ones(shape, dtype=resolve_dtype(dtype)))


def full(shape, value, dtype="double"):
    return Tensor(np.full(shape, value, dtype=resolve_dtype(dtype)))


# -- graph plumbing ----------------------------------------------------------


def make_op(op_name, out_data, inputs, saved, backward_fn):
    """Wrap a forward result, registering a graph node if grad mode is on.

    `backward_fn(upstream)` must return one gradient per input (None for
    inputs that need none) and must not mutate `upstream`. Buffers needed
    by the backward pass go in `saved` (and only there) so memory
    accounting stays faithful.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    rg = _grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = rg
    out.node = GraphNode(op_name, inputs, saved, backward_fn) if rg else None
    return out


def _toposort(root_node):
    """Post-order over the DAG: every node appears after all of its inputs."""
    order = []
    visited = set()
    stack = [(root_node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in visited:
                stack.append((t.node, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad.

    Gradients sum across repeated calls until an explicit zero-grad; each
    node's backward is timed with a monotonic clock.
    """
    if loss.node is None:
        raise GraphError("backward called on a detached tensor")
    if loss.data.size != 1:
        raise GraphError("backward requires a scalar loss")
    order = _toposort(loss.node)
    pending = {id(loss.node): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        t0 = time.perf_counter()
        grads = node.backward_fn(g)
        node.backward_time += time.perf_counter() - t0
        for inp, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if inp.node is not None:
                key = id(inp.node)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            elif inp.requires_grad:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad = inp.grad + gi


# -- graph statistics --------------------------------------------------------


@dataclass
class OpStat:
    call_count: int = 0
    backward_time: float = 0.0


@dataclass
class GraphStats:
    node_count: int
    per_op: dict = field(default_factory=dict)
    saved_tensor_count: int = 0
    saved_tensor_bytes: int = 0

    def top_backward_ops(self, k=10):
        items = sorted(self.per_op.items(), key=lambda kv: -kv[1].backward_time)
        return items[:k]


def graph_stats(root: Tensor) -> GraphStats:
    """Count nodes, per-op calls/backward time, and deduplicated saved bytes.

    Buffers saved by several nodes are counted once (dedup by buffer
    identity). Backward times are zero until a backward pass has run.
    """
    if root.node is None:
        raise GraphError("graph_stats called on a detached tensor")
    nodes = _toposort(root.node)
    per_op = {}
    buffers = {}
    for n in nodes:
        st = per_op.setdefault(n.op_name, OpStat())
        st.call_count += 1
        st.backward_time += n.backward_time
        for buf in n.saved:
            buffers[id(buf)] = buf
    return GraphStats(
        node_count=len(nodes),
        per_op=per_op,
        saved_tensor_count=len(buffers),
        saved_tensor_bytes=sum(b.nbytes for b in buffers.values()),
    )


# -- broadcasting helper -----------------------------------------------------


def _unbroadcast(g, shape):
    """Sum `g` over axes that were broadcast to reach `g.shape` from `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    ash, bsh = a.shape, b.shape
    return make_op(
        "add", a.data + b.data, [a, b], [],
        lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)),
    )


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    ash, bsh = a.shape, b.shape
    return make_op(
        "sub", a.data - b.data, [a, b], [],
        lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)),
    )


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(
        "mul", ad * bd, [a, b], [ad, bd],
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "div")
    if _debug_checks and np.any(b.data == 0):
        raise DomainError("div: zero divisor")
    ad, bd = a.data, b.data
    return make_op(
        "div", ad / bd, [a, b], [ad, bd],
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    return make_op("neg", -a.data, [a], [], lambda g: (-g,))


def log(a):
    a = as_tensor(a)
    if _debug_checks and np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    ad = a.data
    return make_op("log", np.log(ad), [a], [ad], lambda g: (g / ad,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op("exp", out, [a], [out], lambda g: (g * out,))


def sqrt(a):
    a = as_tensor(a)
    if _debug_checks and np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)
    return make_op("sqrt", out, [a], [out], lambda g: (g / (2.0 * out),))


def sin(a):
    a = as_tensor(a)
    ad = a.data
    return make_op("sin", np.sin(ad), [a], [ad], lambda g: (g * np.cos(ad),))


def cos(a):
    a = as_tensor(a)
    ad = a.data
    return make_op("cos", np.cos(ad), [a], [ad], lambda g: (-g * np.sin(ad),))


def atan2(y, x):
    y = as_tensor(y, like=x if isinstance(x, Tensor) else None)
    x = as_tensor(x, like=y)
    _check_broadcast(y, x, "atan2")
    yd, xd = y.data, x.data

    def bw(g):
        denom = xd * xd + yd * yd
        return (_unbroadcast(g * xd / denom, yd.shape),
                _unbroadcast(-g * yd / denom, xd.shape))

    return make_op("atan2", np.arctan2(yd, xd), [y, x], [yd, xd], bw)


def where(cond, a, b):
    """Elementwise select; `cond` is boolean and carries no gradient."""
    cd = cond.data if isinstance(cond, Tensor) else np.asarray(cond)
    if cd.dtype != np.bool_:
        cd = cd.astype(bool)
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = np.where(cd, a.data, b.data)
    ash, bsh = a.shape, b.shape

    def bw(g):
        zero = np.zeros((), dtype=g.dtype)
        return (_unbroadcast(np.where(cd, g, zero), ash),
                _unbroadcast(np.where(cd, zero, g), bsh))

    return make_op("where", out, [a, b], [cd], bw)


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    mask = a.data >= 0
    out = np.where(mask, a.data, slope * a.data)

    def bw(g):
        return (np.where(mask, g, np.asarray(slope, dtype=g.dtype) * g),)

    return make_op("leaky_relu", out, [a], [mask], bw)


TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Canonicalize angles to [0, 2*pi) by floor division; gradient is identity."""
    a = as_tensor(a)
    out = np.mod(a.data, TWO_PI)
    # mod can return 2*pi exactly when the input is a tiny negative number
    out[out == TWO_PI] = 0.0
    return make_op("wrap_angle", out, [a], [], lambda g: (g,))


# -- reductions --------------------------------------------------------------


def _norm_axes(axes, ndim, op):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim if -ndim <= ax < ndim else ax for ax in axes)
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ShapeError(f"{op}: axis {ax} invalid for ndim {ndim}")
    return axes


def _spread(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def sum_(a, axes=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim, "sum")
    sh = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return make_op("sum", np.asarray(out), [a], [],
                   lambda g: (_spread(g, sh, axes, keepdims),))


def mean(a, axes=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim, "mean")
    sh = a.shape
    count = 1
    for ax in axes:
        count *= sh[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return make_op("mean", np.asarray(out), [a], [],
                   lambda g: (_spread(g, sh, axes, keepdims) / count,))


# -- indexing / shape ops ----------------------------------------------------


def slice_(a, key):
    """Basic slicing (ints, slices, ellipsis); returns a copy.

    Fancy integer/boolean indexing is rejected: its backward would need
    scatter-add semantics, which `gather` provides.
    """
    a = as_tensor(a)
    for part in key if isinstance(key, tuple) else (key,):
        if not (part is None or part is Ellipsis or isinstance(part, (int, slice))
                or isinstance(part, np.integer)):
            raise TypeError("slice supports ints/slices only; use gather for "
                            "index arrays")
    try:
        out = a.data[key].copy()
    except IndexError as e:
        raise IndexError(f"slice: {e}")
    sh = a.shape

    def bw(g):
        z = np.zeros(sh, dtype=g.dtype)
        z[key] = g
        return (z,)

    return make_op("slice", out, [a], [], bw)


def select(a, axis, index):
    """Pick one index along an axis (the axis disappears)."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if not -a.shape[axis] <= index < a.shape[axis]:
        raise IndexError(f"select: index {index} out of range for axis {axis} "
                         f"of extent {a.shape[axis]}")
    out = np.take(a.data, index, axis=axis)
    sh = a.shape
    key = (slice(None),) * axis + (index,)

    def bw(g):
        z = np.zeros(sh, dtype=g.dtype)
        z[key] = g
        return (z,)

    return make_op("select", out, [a], [], bw)


def gather(a, axis, index):
    """take_along_axis; gradients scatter-add back to the source positions."""
    a = as_tensor(a)
    axis = axis % a.ndim
    index = np.asarray(index)
    if index.ndim != a.ndim:
        raise ShapeError("gather: index must have the same rank as the input")
    if np.any(index < 0) or np.any(index >= a.shape[axis]):
        raise IndexError("gather: index out of range")
    out = np.take_along_axis(a.data, index, axis=axis)
    sh = a.shape

    def bw(g):
        z = np.zeros(sh, dtype=g.dtype)
        grids = list(np.indices(index.shape, sparse=True))
        grids[axis] = index
        np.add.at(z, tuple(grids), g)
        return (z,)

    return make_op("gather", out, [a], [index], bw)


def masked_scatter(base, mask, source):
    """Replace masked positions of `base` with `source` (same shapes)."""
    base = as_tensor(base)
    source = as_tensor(source, like=base)
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    mask = mask.astype(bool)
    if mask.shape != base.shape or source.shape != base.shape:
        raise ShapeError("masked_scatter: base, mask and source shapes must match")
    out = np.where(mask, source.data, base.data)

    def bw(g):
        zero = np.zeros((), dtype=g.dtype)
        return (np.where(mask, zero, g), np.where(mask, g, zero))

    return make_op("masked_scatter", out, [base, source], [mask], bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_op("concat", out, list(tensors), [], bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    axis_n = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=axis_n) for i in range(len(tensors)))

    return make_op("stack", out, list(tensors), [], bw)


def roll(a, shift, axis):
    """Periodic shift along an axis (lattice translations)."""
    a = as_tensor(a)
    out = np.roll(a.data, shift, axis=axis)
    return make_op("roll", out, [a], [],
                   lambda g: (np.roll(g, -shift, axis=axis),))


def cumsum(a, axis):
    a = as_tensor(a)
    axis = axis % a.ndim
    out = np.cumsum(a.data, axis=axis)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make_op("cumsum", out, [a], [], bw)


def add_at(base, offsets, values):
    """In-place block add: base[..., r0:r0+h, c0:c0+w, ...] += values.

    `offsets` gives the start index for each of the trailing axes of `base`
    that `values`' trailing axes occupy; leading axes must match exactly.
    The base buffer is mutated; the returned tensor supersedes `base`, which
    must not be read afterwards. The backward for the base branch
    materializes a defensive copy of the upstream gradient, so long chains
    of block writes carry a per-node cost proportional to the full buffer
    (the price of slice-assembly inside a gradient graph).
    """
    base = as_tensor(base)
    values = as_tensor(values, like=base)
    k = len(offsets)
    lead = base.ndim - k
    if values.ndim != base.ndim or values.shape[:lead] != base.shape[:lead]:
        raise ShapeError("add_at: leading axes of values must match base")
    key = (slice(None),) * lead + tuple(
        slice(o, o + e) for o, e in zip(offsets, values.shape[lead:])
    )
    for o, e, full_e in zip(offsets, values.shape[lead:], base.shape[lead:]):
        if o < 0 or o + e > full_e:
            raise IndexError("add_at: block out of range")
    base.data[key] += values.data
    base_rg = base.requires_grad

    def bw(g):
        gb = g.copy() if base_rg else None
        return (gb, g[key].copy())

    return make_op("add_at", base.data, [base, values], [], bw)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Matrix product with leading batch broadcasting (both operands ndim >= 2)."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape} disagree")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return (ga, gb)

    return make_op("matmul", ad @ bd, [a, b], [ad, bd], bw)


def logdet(a, pivot_tol=0.0):
    """log|det a| for square (optionally batched) matrices via pivoted LU.

    Raises SingularMatrixError when any |U_ii| underflows `pivot_tol`.
    Backward materializes the explicit inverse from the saved LU factors:
    d log|det A| / dA = (A^{-1})^T.
    """
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"logdet: expected square matrices, got {a.shape}")
    n = a.shape[-1]
    batch_shape = a.shape[:-2]
    lu = np.empty_like(a.data)
    piv = np.empty(batch_shape + (n,), dtype=np.int32)
    out = np.empty(batch_shape, dtype=a.data.dtype)
    for idx in np.ndindex(batch_shape):
        with warnings.catch_warnings():
            # scipy warns on exact zero pivots; the threshold check below
            # turns that condition into SingularMatrixError
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu_i, piv_i = scipy.linalg.lu_factor(a.data[idx], check_finite=False)
        d = np.abs(np.diag(lu_i))
        if np.any(d <= pivot_tol):
            raise SingularMatrixError(
                f"logdet: pivot magnitude {d.min():.3e} <= threshold {pivot_tol:.3e}"
            )
        lu[idx] = lu_i
        piv[idx] = piv_i
        out[idx] = np.log(d).sum()

    def bw(g):
        grad = np.empty_like(lu)
        eye = np.eye(n, dtype=lu.dtype)
        for idx in np.ndindex(batch_shape):
            inv = scipy.linalg.lu_solve((lu[idx], piv[idx]), eye, check_finite=False)
            grad[idx] = g[idx] * inv.T
        return (grad,)

    return make_op("logdet", out, [a], [lu, piv], bw)
