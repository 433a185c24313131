"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built define-by-run: every primitive returns a new ``Tensor``
holding its value, its parents and a closure mapping the output adjoint to
parent adjoints. ``backward`` walks the graph once in reverse topological
order. Nodes whose inputs are all constants record no parents, so forward
passes over frozen parameters (evaluation) keep no graph alive.

Conventions:

* ``abs`` and ``sqrt`` use subgradient 0 at 0.
* ``l2_normalize`` adds ``eps`` (default 1e-12) inside the square root.
* ``log`` requires strictly positive input, ``sqrt`` non-negative input.
"""

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """Value node in a differentiation graph.

    A leaf created with ``requires_grad=True`` is a parameter; after
    ``backward(loss)`` its ``grad`` holds d(loss)/d(leaf).
    """

    __slots__ = ("data", "op", "parents", "_backward", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, *, op="leaf", parents=(), backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.op = op
        self.parents = parents
        self._backward = backward
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

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
    def is_leaf(self):
        return not self.parents

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return multiply(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return divide(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


GraphNode = Tensor


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, op, parents, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(value, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _first_index(mask):
    idx = np.argwhere(mask)[0]
    return tuple(int(i) for i in idx)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), backward)


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, "subtract", (a, b), backward)


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, "multiply", (a, b), backward)


def divide(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    if np.any(b.data == 0.0):
        raise DomainError(f"divide: zero denominator at index {_first_index(b.data == 0.0)}")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, "divide", (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    bad = ~(a.data > 0.0)
    if np.any(bad):
        raise DomainError(f"log: non-positive input {a.data[bad][0]!r} at index {_first_index(bad)}")
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    bad = ~(a.data >= 0.0)
    if np.any(bad):
        raise DomainError(f"sqrt: negative input {a.data[bad][0]!r} at index {_first_index(bad)}")
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, g / (2.0 * safe), 0.0),)

    return _node(out, "sqrt", (a,), backward)


def absolute(a):
    a = as_tensor(a)
    return _node(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# reductions and row-wise norms


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, "sum", (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def row_norm(a, eps=0.0):
    """sqrt(sum_j a_ij^2 + eps) per row, shape (n, 1)."""
    a = as_tensor(a)
    _require_2d("row_norm", a)
    out = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True) + eps)

    def backward(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, g * a.data / safe, 0.0),)

    return _node(out, "row_norm", (a,), backward)


def l2_normalize(a, eps=1e-12):
    """Rows scaled to unit length, with ``eps`` inside the square root."""
    a = as_tensor(a)
    _require_2d("l2_normalize", a)
    norm = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True) + eps)
    out = a.data / norm

    def backward(g):
        dot = (g * a.data).sum(axis=1, keepdims=True)
        return (g / norm - a.data * dot / norm**3,)

    return _node(out, "l2_normalize", (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and layout


def _require_2d(op, a):
    if a.ndim != 2:
        raise ShapeError(f"{op}: expected a 2-D tensor, got shape {a.shape}")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def transpose(a):
    a = as_tensor(a)
    _require_2d("transpose", a)
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def slice_cols(a, start, stop):
    a = as_tensor(a)
    _require_2d("slice_cols", a)
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: range [{start}, {stop}) invalid for shape {a.shape}")

    def backward(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop].copy(), "slice_cols", (a,), backward)


def slice_rows(a, start, stop):
    a = as_tensor(a)
    _require_2d("slice_rows", a)
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: range [{start}, {stop}) invalid for shape {a.shape}")

    def backward(g):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return (full,)

    return _node(a.data[start:stop].copy(), "slice_rows", (a,), backward)


def concat_cols(parts):
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        _require_2d("concat_cols", p)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ, shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=1), "concat_cols", parts, backward)


def concat_rows(parts):
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        _require_2d("concat_rows", p)
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ, shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=0), "concat_rows", parts, backward)


def _check_index(op, index, n):
    index = np.asarray(index)
    if index.ndim != 1 or not np.issubdtype(index.dtype, np.integer):
        raise ShapeError(f"{op}: index must be a 1-D integer array")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"{op}: index out of range for extent {n}")
    return index


def gather_rows(a, index):
    """Rows ``a[index]``; with a permutation this reorders samples."""
    a = as_tensor(a)
    _require_2d("gather_rows", a)
    index = _check_index("gather_rows", index, a.shape[0])

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], "gather_rows", (a,), backward)


def gather_cols(a, index):
    """Columns ``a[:, index]``; with a permutation this reorders coordinates."""
    a = as_tensor(a)
    _require_2d("gather_cols", a)
    index = _check_index("gather_cols", index, a.shape[1])

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full.T, index, g.T)
        return (full,)

    return _node(a.data[:, index], "gather_cols", (a,), backward)


def conv2d(x, w, stride=1, pad=0):
    """NHWC convolution; ``w`` has shape (kh, kw, c_in, c_out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    b, h, wd, c = x.shape
    kh, kw, _, cout = w.shape
    ho = kernels.conv_output_size(h, kh, stride, pad)
    wo = kernels.conv_output_size(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, pad)
    wmat = w.data.reshape(kh * kw * c, cout)
    out = (cols @ wmat).reshape(b, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(b * ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(np.ascontiguousarray(g2 @ wmat.T), b, h, wd, c, kh, kw, stride, pad)
        return gx, gw

    return _node(out, "conv2d", (x, w), backward)


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root):
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Propagate d(loss)/d(node) to every parameter leaf reachable from ``loss``.

    Returns ``{leaf: gradient}`` and also stores each gradient on
    ``leaf.grad``. Adjoints are recomputed from scratch on every call, so
    calling twice on the same graph gives identical results.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    adjoint = {id(loss): np.ones(loss.shape)}
    grads = {}
    for node in reversed(_topological(loss)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            grads[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = np.array(pg, dtype=np.float64, copy=True)
    return grads


def grad(loss, wrt):
    """Gradients of ``loss`` for each tensor in ``wrt`` (zeros if unreachable)."""
    grads = backward(loss)
    return [grads.get(t, np.zeros(t.shape)) for t in wrt]


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.empty_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"finite_diff_grad: non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def max_relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))
