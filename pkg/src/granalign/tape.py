"""Reverse-mode autodiff over a small fixed op set.

Tensors wrap float64 numpy arrays; each op records a vector-Jacobian
closure. Graph construction is skipped entirely when no input requires
gradients, so inference reuses the same code path at negligible cost.

Boolean masks passed to ops follow one convention package-wide:
True marks an entry as padding to be excluded.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, NumericError

_TINY = 1e-30


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        # drop graph edges when nothing upstream needs gradients
        self._parents = tuple(_parents) if (self.requires_grad and _vjp is not None) else ()
        self._vjp = _vjp if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def leaf(x) -> Tensor:
    return Tensor(x, requires_grad=True)


def constant(x) -> Tensor:
    return Tensor(x)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar *root* into every reachable leaf."""
    if root.data.ndim != 0:
        raise DataError(f"backward expects a scalar, got shape {root.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, grad in zip(node._parents, node._vjp(node.grad)):
            if grad is None or not parent.requires_grad:
                continue
            parent.grad = grad if parent.grad is None else parent.grad + grad


def _node(data, parents, vjp) -> Tensor:
    return Tensor(data, _parents=parents, _vjp=vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(a) -> Tensor:
    """Smooth gaussian-error-style activation (tanh form)."""
    a = as_tensor(a)
    x = a.data
    k = np.sqrt(2.0 / np.pi)
    inner = k * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = k * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _node(out, (a,), vjp)


# -- shape manipulation -------------------------------------------------


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(parts, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def repeat_row(v, n: int) -> Tensor:
    """Tile a vector into n identical rows."""
    v = as_tensor(v)
    return _node(np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DataError(f"row index out of range for shape {a.data.shape}")

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(a.data[idx], (a,), vjp)


def pad_cols(a, total: int) -> Tensor:
    """Append zero columns up to *total*; the padding carries no gradient."""
    a = as_tensor(a)
    rows, cols = a.data.shape
    if total < cols:
        raise DataError(f"pad_cols: total {total} < current {cols}")
    out = np.zeros((rows, total))
    out[:, :cols] = a.data
    return _node(out, (a,), lambda g: (g[:, :cols],))


def diag(a) -> Tensor:
    a = as_tensor(a)
    n, m = a.data.shape
    if n != m:
        raise DataError(f"diag expects a square matrix, got {a.data.shape}")

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.fill_diagonal(ga, g)
        return (ga,)

    return _node(np.diagonal(a.data).copy(), (a,), vjp)


def stack_scalars(grid) -> Tensor:
    """Assemble a vector (flat list) or matrix (list of rows) of scalar tensors."""
    if grid and isinstance(grid[0], (list, tuple)):
        rows, cols = len(grid), len(grid[0])
        flat = [as_tensor(t) for row in grid for t in row]
        data = np.array([t.data for t in flat]).reshape(rows, cols)

        def vjp(g):
            return tuple(g[i, j] for i in range(rows) for j in range(cols))

        return _node(data, tuple(flat), vjp)
    flat = [as_tensor(t) for t in grid]
    data = np.array([float(t.data) for t in flat])

    def vjp(g):
        return tuple(g[i] for i in range(len(flat)))

    return _node(data, tuple(flat), vjp)


# -- reductions ---------------------------------------------------------


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _node(
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),),
    )


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


def mean_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return scale(sum_axis(a, axis), 1.0 / a.data.shape[axis])


# -- linear algebra -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim > 2 or B.ndim > 2:
        raise DataError("matmul supports rank <= 2 operands")
    out = A @ B

    def vjp(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2 and B.ndim == 1:
            return np.outer(g, B), A.T @ g
        if A.ndim == 1 and B.ndim == 2:
            return B @ g, np.outer(A, g)
        return g * B, g * A  # 1-D dot

    return _node(out, (a, b), vjp)


def dot(a, b) -> Tensor:
    return matmul(a, b)


def affine_rows(x, weight, bias) -> Tensor:
    """Row-wise affine map: x @ weight.T + bias. Accepts 1-D or 2-D x."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.shape[-1] != weight.data.shape[1]:
        raise DataError(
            f"affine: input dim {x.data.shape[-1]} != weight in-dim {weight.data.shape[1]}"
        )
    return add(matmul(x, transpose(weight)), as_tensor(bias))


def l2norm_rows(x, what: str = "row") -> Tensor:
    """Normalize each row (or a single vector) to unit L2 norm."""
    x = as_tensor(x)
    X = np.atleast_2d(x.data)
    norms = np.linalg.norm(X, axis=1)
    bad = np.nonzero(norms < _TINY)[0]
    if bad.size:
        raise NumericError(f"zero-norm {what} {int(bad[0])}")
    if x.data.ndim == 1:
        out = x.data / norms[0]

        def vjp1(g):
            return ((g - np.dot(g, out) * out) / norms[0],)

        return _node(out, (x,), vjp1)
    out = X / norms[:, None]

    def vjp(g):
        return ((g - (g * out).sum(axis=1, keepdims=True) * out) / norms[:, None],)

    return _node(out, (x,), vjp)


def cosine(a, b) -> Tensor:
    """Cosine similarity between two vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise DataError(f"cosine expects equal-length vectors, got {a.data.shape}, {b.data.shape}")
    na, nb = np.linalg.norm(a.data), np.linalg.norm(b.data)
    if na < _TINY or nb < _TINY:
        raise NumericError("cosine: zero-norm input")
    c = float(a.data @ b.data) / (na * nb)

    def vjp(g):
        ga = g * (b.data / (na * nb) - c * a.data / na**2)
        gb = g * (a.data / (na * nb) - c * b.data / nb**2)
        return ga, gb

    return _node(c, (a, b), vjp)


def cosine_rows(x, s, what: str = "row") -> Tensor:
    """Per-row cosine similarity of a matrix against one vector."""
    x, s = as_tensor(x), as_tensor(s)
    X, S = x.data, s.data
    if X.ndim != 2 or S.ndim != 1 or X.shape[1] != S.shape[0]:
        raise DataError(f"cosine_rows: incompatible shapes {X.shape}, {S.shape}")
    nr = np.linalg.norm(X, axis=1)
    ns = np.linalg.norm(S)
    bad = np.nonzero(nr < _TINY)[0]
    if bad.size:
        raise NumericError(f"zero-norm {what} {int(bad[0])}")
    if ns < _TINY:
        raise NumericError("cosine_rows: zero-norm reference vector")
    c = (X @ S) / (nr * ns)

    def vjp(g):
        gx = g[:, None] * (S[None, :] / (nr[:, None] * ns) - c[:, None] * X / nr[:, None] ** 2)
        gs = (g[:, None] * (X / (nr[:, None] * ns) - (c[:, None] / ns**2) * S[None, :])).sum(axis=0)
        return gx, gs

    return _node(c, (x, s), vjp)


# -- softmax family -----------------------------------------------------


def softmax(x, pad_mask=None, axis: int = -1) -> Tensor:
    """Masked, max-stabilized softmax along *axis*.

    Entries where pad_mask is True come out exactly 0 and are excluded
    from the normalization. A slice with every entry masked is a numeric
    failure.
    """
    x = as_tensor(x)
    X = x.data
    if pad_mask is not None:
        mask = np.broadcast_to(np.asarray(pad_mask, dtype=bool), X.shape)
        neg = np.where(mask, -np.inf, X)
        m = neg.max(axis=axis, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise NumericError("softmax: slice with all entries masked")
        e = np.where(mask, 0.0, np.exp(neg - m))
    else:
        m = X.max(axis=axis, keepdims=True)
        e = np.exp(X - m)
    z = e.sum(axis=axis, keepdims=True)
    out = e / z

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (x,), vjp)


def logsumexp(x, axis: int) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    z = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(z)).squeeze(axis=axis)
    soft = e / z

    def vjp(g):
        return (np.expand_dims(g, axis) * soft,)

    return _node(out, (x,), vjp)


def layernorm_rows(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization with learned scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    X = x.data
    mu = X.mean(axis=1, keepdims=True)
    var = ((X - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        gl = g * gamma.data
        gx = (gl - gl.mean(axis=1, keepdims=True) - xhat * (gl * xhat).mean(axis=1, keepdims=True)) * inv
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), vjp)
