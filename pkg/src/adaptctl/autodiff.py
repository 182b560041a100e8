"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is a classic tape: every operation allocates a `Value` node that
stores its result, references to its parent nodes, and a closure that knows
how to push an incoming cotangent back to those parents.  Calling
`backward(loss)` on a scalar node walks the graph once in reverse
topological order and accumulates gradients on every reachable node.

Design constraints, in rough order of importance:

* Arrays are rank 0, 1 or 2 and always float64.  Broadcasting is allowed
  wherever numpy allows it for those ranks; the backward pass undoes it by
  summing over the broadcast axes.
* Tapes are cheap and disposable.  A fresh graph is built for every loss
  evaluation and dropped after `backward`, so nodes never cache anything
  beyond what their own backward closure needs.
* Besides the generic elementwise and matrix ops there are a few fused
  nodes (`linear`, `weighted_mix`, `gram_matrix`, `gram_vector`,
  `solve_spd`, `tanh_affine`) that collapse common composite patterns into
  a single node each.  These exist purely to keep node counts down in the
  rollout and training loops; their gradients are checked against finite
  differences like everything else.
* Non-Value operands are treated as constants: they participate in the
  forward computation but receive no gradient.

Gradient reads should go through `grad_of`, which maps "never touched by
the backward walk" to a zero array of the right shape.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg


class DimensionError(ValueError):
    """Raised when an operand's rank or shape does not fit an operation."""


class NumericalError(RuntimeError):
    """Raised when a linear solve or factorization fails numerically."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 2:
        raise DimensionError(f"arrays of rank {a.ndim} are not supported (max rank 2)")
    return a


class Value:
    """One node of the autodiff graph.

    `data` is the forward result, `grad` is lazily allocated during the
    backward pass and stays None for nodes the walk never reaches.
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, parents=(), backward=None, op="leaf"):
        self.data = _as_array(data)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self._op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Value(op={self._op}, shape={self.data.shape})"

    # Operator sugar.  Reverse variants exist so `2.0 * v` works.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _data(x):
    return x.data if isinstance(x, Value) else _as_array(x)


def _accumulate(node: Value, g: np.ndarray) -> None:
    if node.grad is None:
        # Copy: `g` may be a pass-through of (or view into) another node's
        # gradient, and this buffer gets mutated by later contributions.
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    # Sum away leading axes numpy prepended.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    # Sum over axes that were size 1 in the original.
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def grad_of(v: Value) -> np.ndarray:
    """Gradient of the last backward() call w.r.t. `v`; zeros if unreachable."""
    if v.grad is None:
        return np.zeros_like(v.data)
    return v.grad


def backward(output: Value) -> None:
    """Accumulate d(output)/d(node) into `.grad` of every reachable node.

    `output` must hold a single element.  Gradients from previous calls are
    cleared on the subgraph reachable from `output` before the new walk.
    """
    if output.data.size != 1:
        raise DimensionError(
            f"backward requires a scalar output, got shape {output.data.shape}"
        )
    topo = _toposort(output)
    for node in topo:
        node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _toposort(root: Value) -> list:
    """Iterative depth-first topological order ending at `root`."""
    order = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Value:
    da, db = _data(a), _data(b)
    out_data = da + db
    if out_data.ndim > 2:
        raise DimensionError("add produced an array of rank > 2")
    parents = tuple(x for x in (a, b) if isinstance(x, Value))

    def back(g):
        if isinstance(a, Value):
            _accumulate(a, _unbroadcast(g, da.shape))
        if isinstance(b, Value):
            _accumulate(b, _unbroadcast(g, db.shape))

    return Value(out_data, parents, back, "add")


def sub(a, b) -> Value:
    da, db = _data(a), _data(b)
    out_data = da - db
    parents = tuple(x for x in (a, b) if isinstance(x, Value))

    def back(g):
        if isinstance(a, Value):
            _accumulate(a, _unbroadcast(g, da.shape))
        if isinstance(b, Value):
            _accumulate(b, _unbroadcast(-g, db.shape))

    return Value(out_data, parents, back, "sub")


def mul(a, b) -> Value:
    da, db = _data(a), _data(b)
    out_data = da * db
    if out_data.ndim > 2:
        raise DimensionError("mul produced an array of rank > 2")
    parents = tuple(x for x in (a, b) if isinstance(x, Value))

    def back(g):
        if isinstance(a, Value):
            _accumulate(a, _unbroadcast(g * db, da.shape))
        if isinstance(b, Value):
            _accumulate(b, _unbroadcast(g * da, db.shape))

    return Value(out_data, parents, back, "mul")


def reciprocal(a) -> Value:
    da = _data(a)
    out_data = 1.0 / da

    def back(g):
        if isinstance(a, Value):
            _accumulate(a, -g * out_data * out_data)

    return Value(out_data, (a,) if isinstance(a, Value) else (), back, "reciprocal")


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def tanh(a) -> Value:
    da = _data(a)
    out_data = np.tanh(da)

    def back(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return Value(out_data, (a,), back, "tanh") if isinstance(a, Value) else Value(out_data)


def relu(a) -> Value:
    da = _data(a)
    out_data = np.maximum(da, 0.0)

    def back(g):
        _accumulate(a, g * (da > 0.0))

    return Value(out_data, (a,), back, "relu") if isinstance(a, Value) else Value(out_data)


def square(a) -> Value:
    da = _data(a)
    out_data = da * da

    def back(g):
        _accumulate(a, g * 2.0 * da)

    return Value(out_data, (a,), back, "square") if isinstance(a, Value) else Value(out_data)


def sqrt_guarded(a, floor: float = 1e-9) -> Value:
    """Elementwise sqrt of max(a, floor).

    Below the floor the output is constant, so the gradient there is exactly
    zero rather than the unbounded 1/(2*sqrt(x)).
    """
    da = _data(a)
    clipped = np.maximum(da, floor)
    out_data = np.sqrt(clipped)

    def back(g):
        _accumulate(a, g * (da > floor) * (0.5 / out_data))

    return Value(out_data, (a,), back, "sqrt") if isinstance(a, Value) else Value(out_data)


def sin(a) -> Value:
    da = _data(a)
    out_data = np.sin(da)

    def back(g):
        _accumulate(a, g * np.cos(da))

    return Value(out_data, (a,), back, "sin") if isinstance(a, Value) else Value(out_data)


def cos(a) -> Value:
    da = _data(a)
    out_data = np.cos(da)

    def back(g):
        _accumulate(a, -g * np.sin(da))

    return Value(out_data, (a,), back, "cos") if isinstance(a, Value) else Value(out_data)


def tanh_affine(a, scale, shift) -> Value:
    """Fused shift + scale * tanh(a) with constant scale and shift.

    Used to squash raw network outputs into a box: rows of `a` map to
    shift + scale * tanh(a) elementwise, which stays strictly inside
    (shift - |scale|, shift + |scale|).
    """
    da = _data(a)
    s = _as_array(scale)
    t = np.tanh(da)
    out_data = _as_array(shift) + s * t

    def back(g):
        _accumulate(a, g * s * (1.0 - t * t))

    return Value(out_data, (a,), back, "tanh_affine") if isinstance(a, Value) else Value(out_data)


# ---------------------------------------------------------------------------
# reductions, shaping, stacking


def vsum(a) -> Value:
    da = _data(a)
    out_data = np.asarray(da.sum())

    def back(g):
        _accumulate(a, np.broadcast_to(g, da.shape).copy())

    return Value(out_data, (a,), back, "sum") if isinstance(a, Value) else Value(out_data)


def vmean(a) -> Value:
    da = _data(a)
    out_data = np.asarray(da.mean())
    n = da.size

    def back(g):
        _accumulate(a, np.broadcast_to(g / n, da.shape).copy())

    return Value(out_data, (a,), back, "mean") if isinstance(a, Value) else Value(out_data)


def getitem(a, key) -> Value:
    if not isinstance(a, Value):
        return Value(_as_array(a)[key])
    out_data = a.data[key]

    def back(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return Value(out_data, (a,), back, "slice")


def reshape(a, shape) -> Value:
    da = _data(a)
    out_data = da.reshape(shape)
    if out_data.ndim > 2:
        raise DimensionError("reshape target has rank > 2")

    def back(g):
        _accumulate(a, g.reshape(da.shape))

    return Value(out_data, (a,), back, "reshape") if isinstance(a, Value) else Value(out_data)


def concat(parts, axis: int = 0) -> Value:
    datas = [_data(p) for p in parts]
    out_data = np.concatenate(datas, axis=axis)
    parents = tuple(p for p in parts if isinstance(p, Value))
    # Offsets of each part along the concat axis.
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Value):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(part, g[tuple(sl)])

    return Value(out_data, parents, back, "concat")


# ---------------------------------------------------------------------------
# matrix ops


def matmul(a, b) -> Value:
    da, db = _data(a), _data(b)
    if da.ndim == 0 or db.ndim == 0:
        raise DimensionError("matmul operands must have rank >= 1")
    out_data = da @ db
    parents = tuple(x for x in (a, b) if isinstance(x, Value))

    def back(g):
        ga = gb = None
        if da.ndim == 2 and db.ndim == 2:
            ga, gb = g @ db.T, da.T @ g
        elif da.ndim == 2 and db.ndim == 1:
            ga, gb = np.outer(g, db), da.T @ g
        elif da.ndim == 1 and db.ndim == 2:
            ga, gb = g @ db.T, np.outer(da, g)
        else:  # vector dot vector, scalar out
            ga, gb = g * db, g * da
        if isinstance(a, Value):
            _accumulate(a, ga)
        if isinstance(b, Value):
            _accumulate(b, gb)

    return Value(out_data, parents, back, "matmul")


def linear(x, w, b) -> Value:
    """Fused affine map x @ w.T + b with weight `w` stored as (out, in).

    `x` may be a single row (in,) or a batch (m, in).
    """
    dx, dw, db_ = _data(x), _data(w), _data(b)
    if dx.shape[-1] != dw.shape[1]:
        raise DimensionError(
            f"linear: input width {dx.shape[-1]} does not match weight in-dim {dw.shape[1]}"
        )
    out_data = dx @ dw.T + db_
    parents = tuple(v for v in (x, w, b) if isinstance(v, Value))

    def back(g):
        if isinstance(x, Value):
            _accumulate(x, g @ dw)
        if dx.ndim == 1:
            gw = np.outer(g, dx)
            gb = g
        else:
            gw = g.T @ dx
            gb = g.sum(axis=0)
        if isinstance(w, Value):
            _accumulate(w, gw)
        if isinstance(b, Value):
            _accumulate(b, gb)

    return Value(out_data, parents, back, "linear")


def weighted_mix(coeffs, ys) -> Value:
    """Row-wise linear combination  out[r] = sum_j coeffs[r, j] * ys[j][r].

    `coeffs` has shape (m, B) or (1, B) (the latter broadcasts one
    coefficient vector over the whole batch); each element of `ys` is an
    (m, n) block.  This is the mixing step that turns B basis evaluations
    into one vector field evaluation, fused into a single node.
    """
    dc = _data(coeffs)
    dys = [_data(y) for y in ys]
    if dc.ndim != 2 or dc.shape[1] != len(dys):
        raise DimensionError(
            f"weighted_mix: coeffs shape {dc.shape} does not match {len(dys)} blocks"
        )
    m, n = dys[0].shape
    out_data = np.zeros((m, n))
    for j, dy in enumerate(dys):
        out_data += dc[:, j : j + 1] * dy
    parents = tuple(v for v in [coeffs, *ys] if isinstance(v, Value))

    def back(g):
        for j, y in enumerate(ys):
            if isinstance(y, Value):
                _accumulate(y, dc[:, j : j + 1] * g)
        if isinstance(coeffs, Value):
            gc = np.empty((g.shape[0], len(dys)))
            for j, dy in enumerate(dys):
                gc[:, j] = (g * dy).sum(axis=1)
            _accumulate(coeffs, _unbroadcast(gc, dc.shape))

    return Value(out_data, parents, back, "weighted_mix")


def gram_matrix(ys) -> Value:
    """Empirical Gram matrix of B sample blocks.

    G[i, j] = (1/m) * sum over samples and output dims of ys[i] * ys[j],
    where every block is an (m, n) array of function outputs.  Returned as
    a (B, B) node; the forward result is exactly symmetric.
    """
    dys = [_data(y) for y in ys]
    m = dys[0].shape[0]
    flat = np.stack([dy.reshape(-1) for dy in dys])  # (B, m*n)
    g_mat = flat @ flat.T / m
    g_mat = 0.5 * (g_mat + g_mat.T)
    parents = tuple(y for y in ys if isinstance(y, Value))

    def back(g):
        sym = (g + g.T) / m
        gflat = sym @ flat  # (B, m*n)
        for j, y in enumerate(ys):
            if isinstance(y, Value):
                _accumulate(y, gflat[j].reshape(dys[j].shape))

    return Value(g_mat, parents, back, "gram_matrix")


def gram_vector(ys, target) -> Value:
    """Projections F[j] = (1/m) * sum(ys[j] * target) for constant target."""
    dys = [_data(y) for y in ys]
    t = _as_array(target)
    m = t.shape[0]
    f = np.array([float((dy * t).sum()) / m for dy in dys])
    parents = tuple(y for y in ys if isinstance(y, Value))

    def back(g):
        for j, y in enumerate(ys):
            if isinstance(y, Value):
                _accumulate(y, (g[j] / m) * t)

    return Value(f, parents, back, "gram_vector")


def solve_spd(a, b) -> Value:
    """Solve a @ x = b for symmetric positive definite `a` via Cholesky.

    The input is symmetrized as (a + a.T)/2 before factorization, and the
    backward pass reuses the factor: with incoming cotangent g,
    grad_b = a^{-1} g and grad_a = -(grad_b x^T + x grad_b^T)/2, which is
    the adjoint consistent with the symmetrized forward map.
    """
    da, db = _data(a), _data(b)
    da = 0.5 * (da + da.T)
    try:
        factor = scipy.linalg.cho_factor(da, lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        if np.all(np.isfinite(da)):
            eigs = np.linalg.eigvalsh(da)
            detail = f"eigenvalue range [{eigs.min():.3e}, {eigs.max():.3e}]"
        else:
            detail = "matrix contains non-finite entries"
        raise NumericalError(f"Cholesky factorization failed: {detail}") from exc
    x = scipy.linalg.cho_solve(factor, db)
    parents = tuple(v for v in (a, b) if isinstance(v, Value))

    def back(g):
        gb = scipy.linalg.cho_solve(factor, g)
        if isinstance(b, Value):
            _accumulate(b, gb)
        if isinstance(a, Value):
            ga = np.outer(gb, x)
            _accumulate(a, -0.5 * (ga + ga.T))

    return Value(x, parents, back, "solve_spd")
