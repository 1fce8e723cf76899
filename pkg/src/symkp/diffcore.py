"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Each op builds one node of an implicit DAG: a Tensor stores its value, the
tensors it was computed from, and a closure that pushes the adjoint to
those parents. ``Tensor.backward`` topologically sorts the DAG and runs
the closures in reverse. Index-selecting reductions (max, min, nearest
neighbour) record their winners and route the full gradient to them, the
usual subgradient convention. Shapes are explicit; the only broadcasting
is the row-wise bias in ``affine`` and scalar-vs-array binary ops.
"""

from __future__ import annotations

import numpy as np

_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op output finiteness validation (slow; meant for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class ShapeMismatchError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, seed: float = 1.0) -> None:
        """Reverse accumulation from a scalar tensor.

        Grads add into any grads already present on leaves, so calling
        backward once per batch member accumulates the batch gradient.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        self._accum(np.full_like(self.data, seed))
        for t in reversed(order):
            if t._backward_fn is not None:
                t._backward_fn()

    # Python operators cover the scalar plumbing used by callers.
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward_fn = backward_fn
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeMismatchError(f"{op}: shapes {a.data.shape} and {b.data.shape}")


def _reduce_to(g, t: Tensor):
    if t.data.shape == np.shape(g):
        return g
    return np.sum(g).reshape(t.data.shape)  # scalar operand


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    out = _result(a.data + b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a._accum(_reduce_to(out.grad, a))
        if b.requires_grad:
            b._accum(_reduce_to(out.grad, b))

    out._backward_fn = backward if out.requires_grad else None
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = _result(a.data - b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a._accum(_reduce_to(out.grad, a))
        if b.requires_grad:
            b._accum(_reduce_to(-out.grad, b))

    out._backward_fn = backward if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = _result(a.data * b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a._accum(_reduce_to(out.grad * b.data, a))
        if b.requires_grad:
            b._accum(_reduce_to(out.grad * a.data, b))

    out._backward_fn = backward if out.requires_grad else None
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {a.data.shape} and {b.data.shape}")
    out = _result(a.data @ b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a._accum(out.grad @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ out.grad)

    out._backward_fn = backward if out.requires_grad else None
    return out


def affine(x, w, b) -> Tensor:
    """x @ w + b with the bias broadcast across rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if (x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]
            or b.data.shape != (w.data.shape[1],)):
        raise ShapeMismatchError(
            f"affine: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}")
    out = _result(x.data @ w.data + b.data, (x, w, b), None)

    def backward():
        if x.requires_grad:
            x._accum(out.grad @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ out.grad)
        if b.requires_grad:
            b._accum(out.grad.sum(axis=0))

    out._backward_fn = backward if out.requires_grad else None
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"transpose: need 2-d tensor, got {a.data.shape}")
    out = _result(a.data.T.copy(), (a,), None)

    def backward():
        a._accum(out.grad.T)

    out._backward_fn = backward if out.requires_grad else None
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.reshape(shape), (a,), None)

    def backward():
        a._accum(out.grad.reshape(a.data.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), None)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                p._accum(out.grad[tuple(idx)])

    out._backward_fn = backward if out.requires_grad else None
    return out


def gather_rows(a, indices) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = _result(a.data[idx], (a,), None)

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._accum(g)

    out._backward_fn = backward if out.requires_grad else None
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = _result(np.maximum(a.data, 0.0), (a,), None)

    def backward():
        a._accum(out.grad * (a.data > 0))

    out._backward_fn = backward if out.requires_grad else None
    return out


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    out = _result(np.where(a.data > 0, a.data, slope * a.data), (a,), None)

    def backward():
        a._accum(out.grad * np.where(a.data > 0, 1.0, slope))

    out._backward_fn = backward if out.requires_grad else None
    return out


def sin(a) -> Tensor:
    a = as_tensor(a)
    out = _result(np.sin(a.data), (a,), None)

    def backward():
        a._accum(out.grad * np.cos(a.data))

    out._backward_fn = backward if out.requires_grad else None
    return out


def cos(a) -> Tensor:
    a = as_tensor(a)
    out = _result(np.cos(a.data), (a,), None)

    def backward():
        a._accum(-out.grad * np.sin(a.data))

    out._backward_fn = backward if out.requires_grad else None
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data * a.data, (a,), None)

    def backward():
        a._accum(out.grad * 2.0 * a.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _result(np.sqrt(a.data), (a,), None)

    def backward():
        a._accum(out.grad * 0.5 / out.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def tsum(a) -> Tensor:
    """Sum of all entries, returning a scalar tensor."""
    a = as_tensor(a)
    out = _result(np.sum(a.data), (a,), None)

    def backward():
        a._accum(np.full_like(a.data, float(out.grad)))

    out._backward_fn = backward if out.requires_grad else None
    return out


def mean_over_set(a) -> Tensor:
    """Mean over axis 0 (the set axis)."""
    a = as_tensor(a)
    n = a.data.shape[0]
    out = _result(a.data.mean(axis=0), (a,), None)

    def backward():
        a._accum(np.broadcast_to(out.grad / n, a.data.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def max_over_set(a) -> Tensor:
    """Column-wise max over axis 0; gradient routes to the winning rows."""
    return _extremum_over_set(a, np.argmax)


def min_over_set(a) -> Tensor:
    """Column-wise min over axis 0; gradient routes to the winning rows."""
    return _extremum_over_set(a, np.argmin)


def _extremum_over_set(a, arg_fn) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim == 1:
        win = int(arg_fn(a.data))
        out = _result(a.data[win], (a,), None)

        def backward1d():
            g = np.zeros_like(a.data)
            g[win] = float(out.grad)
            a._accum(g)

        out._backward_fn = backward1d if out.requires_grad else None
        return out
    winners = arg_fn(a.data, axis=0)
    cols = np.arange(a.data.shape[1])
    out = _result(a.data[winners, cols], (a,), None)

    def backward():
        g = np.zeros_like(a.data)
        g[winners, cols] = out.grad
        a._accum(g)

    out._backward_fn = backward if out.requires_grad else None
    return out


def segment_max(a, segment_ids, n_segments: int) -> Tensor:
    """Per-segment column-wise max of rows; winners get the gradient.

    ``segment_ids`` assigns each row of ``a`` to one of ``n_segments``
    groups; every group must be nonempty.
    """
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    n_cols = a.data.shape[1]
    vals = np.empty((n_segments, n_cols))
    winners = np.empty((n_segments, n_cols), dtype=np.intp)
    for s in range(n_segments):
        rows = np.flatnonzero(seg == s)
        if rows.size == 0:
            raise ValueError(f"segment {s} is empty")
        sub = a.data[rows]
        arg = np.argmax(sub, axis=0)
        winners[s] = rows[arg]
        vals[s] = sub[arg, np.arange(n_cols)]
    out = _result(vals, (a,), None)
    cols = np.broadcast_to(np.arange(n_cols), (n_segments, n_cols))

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, (winners, cols), out.grad)
        a._accum(g)

    out._backward_fn = backward if out.requires_grad else None
    return out


def segment_mean(a, segment_ids, n_segments: int) -> Tensor:
    """Per-segment column-wise mean of rows; every group must be nonempty."""
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("segment_mean: empty segment")
    sums = np.zeros((n_segments, a.data.shape[1]))
    np.add.at(sums, seg, a.data)
    out = _result(sums / counts[:, None], (a,), None)

    def backward():
        a._accum(out.grad[seg] / counts[seg, None])

    out._backward_fn = backward if out.requires_grad else None
    return out


def prod3(a) -> Tensor:
    """Product of the entries of a length-3 vector (bounding-box volume)."""
    a = as_tensor(a)
    if a.data.shape != (3,):
        raise ShapeMismatchError(f"prod3: need shape (3,), got {a.data.shape}")
    x, y, z = a.data
    out = _result(np.asarray(x * y * z), (a,), None)

    def backward():
        g = float(out.grad)
        a._accum(np.array([y * z, x * z, x * y]) * g)

    out._backward_fn = backward if out.requires_grad else None
    return out


def huber(a, delta: float = 1.0) -> Tensor:
    """Elementwise Huber: x^2/2 inside |x|<=delta, linear tails outside."""
    a = as_tensor(a)
    absx = np.abs(a.data)
    quad = absx <= delta
    data = np.where(quad, 0.5 * a.data * a.data, delta * (absx - 0.5 * delta))
    out = _result(data, (a,), None)

    def backward():
        a._accum(out.grad * np.where(quad, a.data, delta * np.sign(a.data)))

    out._backward_fn = backward if out.requires_grad else None
    return out


def min_sqdist_to_set(x, refs) -> Tensor:
    """Per-row minimum squared distance from ``x`` to ``refs``.

    The matched reference index is held fixed during backward, so the
    gradient flows to each query row and (when refs is differentiable)
    to its matched reference row only.
    """
    x, refs = as_tensor(x), as_tensor(refs)
    diff = x.data[:, None, :] - refs.data[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    match = np.argmin(d, axis=1)
    out = _result(d[np.arange(len(x.data)), match], (x, refs), None)
    delta = x.data - refs.data[match]

    def backward():
        g2 = 2.0 * out.grad[:, None] * delta
        if x.requires_grad:
            x._accum(g2)
        if refs.requires_grad:
            g = np.zeros_like(refs.data)
            np.add.at(g, match, -g2)
            refs._accum(g)

    out._backward_fn = backward if out.requires_grad else None
    return out


def rotate_about_up(points, cos_sin) -> Tensor:
    """Rotate row points about the +z axis by the (cos, sin) pair tensor."""
    points, cos_sin = as_tensor(points), as_tensor(cos_sin)
    if points.data.ndim != 2 or points.data.shape[1] != 3 or cos_sin.data.shape != (2,):
        raise ShapeMismatchError(
            f"rotate_about_up: points {points.data.shape}, cos_sin {cos_sin.data.shape}")
    c, s = cos_sin.data
    px, py, pz = points.data[:, 0], points.data[:, 1], points.data[:, 2]
    out = _result(np.stack([c * px - s * py, s * px + c * py, pz], axis=1),
                  (points, cos_sin), None)

    def backward():
        gx, gy, gz = out.grad[:, 0], out.grad[:, 1], out.grad[:, 2]
        if points.requires_grad:
            points._accum(np.stack([c * gx + s * gy, -s * gx + c * gy, gz], axis=1))
        if cos_sin.requires_grad:
            gc = float(np.sum(gx * px + gy * py))
            gs = float(np.sum(-gx * py + gy * px))
            cos_sin._accum(np.array([gc, gs]))

    out._backward_fn = backward if out.requires_grad else None
    return out


def unit2(v, tol: float = 1e-12):
    """Normalize a length-2 vector to the unit circle.

    Returns (tensor, degenerate). A (near-)zero input falls back to the
    constant (1, 0), carries no gradient, and is flagged degenerate.
    """
    v = as_tensor(v)
    if v.data.shape != (2,):
        raise ShapeMismatchError(f"unit2: need shape (2,), got {v.data.shape}")
    n = float(np.linalg.norm(v.data))
    if n < tol:
        return Tensor(np.array([1.0, 0.0])), True
    u = v.data / n
    out = _result(u, (v,), None)

    def backward():
        g = out.grad
        v._accum((g - u * float(u @ g)) / n)

    out._backward_fn = backward if out.requires_grad else None
    return out, False


def grad_check(build_fn, leaves, step: float = 1e-5, max_entries: int | None = None,
               seed: int = 0, skip_ties: bool = False, tie_tol: float = 1e-4) -> float:
    """Worst relative error between backprop and central finite differences.

    ``build_fn`` must rebuild the scalar loss from the current leaf data
    each call. Checks every entry of every leaf unless ``max_entries``
    caps the per-leaf count (entries then chosen by a seeded draw).
    The error denominator is max(1, |analytic|).

    Central differences are meaningless across the kinks of the
    subgradient ops (max/min winners, nearest-neighbour matches,
    activation corners): with ``skip_ties`` an entry whose one-sided
    slopes disagree by more than ``tie_tol`` relative is excluded.
    """
    for leaf in leaves:
        leaf.zero_grad()
    loss = build_fn()
    loss.backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else np.array(l.grad)
                for l in leaves]
    base = float(loss.data)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            up = float(build_fn().data)
            flat[i] = orig - step
            dn = float(build_fn().data)
            flat[i] = orig
            a = ana.reshape(-1)[i]
            scale = max(1.0, abs(a))
            if skip_ties:
                right = (up - base) / step
                left = (base - dn) / step
                if abs(right - left) > tie_tol * scale:
                    continue
            numeric = (up - dn) / (2.0 * step)
            worst = max(worst, abs(a - numeric) / scale)
    return worst
