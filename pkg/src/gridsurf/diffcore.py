"""Reverse-mode automatic differentiation over dense numpy arrays.

Implements a small define-by-run graph (``Tensor`` nodes holding ndarrays)
with just enough operator coverage for feature-grid reconstruction:
elementwise math, reductions, matmul, indexing, and trilinear grid
sampling.  Every vector-Jacobian product is itself expressed with graph
ops, so a gradient produced with ``create_graph=True`` can be
differentiated once more.  This is what lets eikonal and smoothness
penalties (losses on the spatial gradient of the SDF) backpropagate into
grid features, decoder weights, and camera poses.

Grid sampling is the one op whose second-order rules are hand-coded:
trilinear interpolation is piecewise trilinear in position, so its
position Jacobian, position Hessian (zero diagonal inside a cell), and
mixed position/feature block all have short closed forms.  A third
differentiation of the sampling op is out of contract and raises
``GradOrderError``.

Precision follows the input arrays; nothing here forces a dtype.
"""

from __future__ import annotations

import weakref

import numpy as np
from numba import njit

__all__ = [
    "Tensor",
    "Tape",
    "GridGeom",
    "GridBoundsError",
    "GradOrderError",
    "constant",
    "leaf",
    "track",
    "grad",
    "pause_grad",
    "set_finite_checks",
    "finite_checks_enabled",
    "check_finite",
]


class GridBoundsError(ValueError):
    """A sample position fell outside the grid's world box."""


class GradOrderError(RuntimeError):
    """Requested a derivative order the op does not provide."""


_FINITE_CHECKS = True
_GRAD_ENABLED = True


def set_finite_checks(enabled):
    """Toggle NaN/Inf validation at loss and gradient boundaries."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def finite_checks_enabled():
    return _FINITE_CHECKS


def check_finite(arr, what):
    """Raise FloatingPointError if ``arr`` has NaN/Inf and checks are on."""
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


class pause_grad:
    """Context manager that makes all ops record no graph.

    Used for inference-only forward passes (importance sampling, mesh
    extraction) so that parameter tensors with ``requires_grad`` do not
    accumulate graph nodes.
    """

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


# ---------------------------------------------------------------------------
# graph node


class Tensor:
    """A node in the computation graph wrapping one ndarray.

    Attributes:
        data: the ndarray value (treated as read-only once wrapped).
        requires_grad: whether any ancestor is a differentiable leaf.
    """

    __slots__ = ("data", "parents", "_vjp", "requires_grad", "op", "__weakref__")

    def __init__(self, data, parents=(), vjp=None, requires_grad=False, op="leaf"):
        self.data = np.asarray(data)
        self.parents = tuple(parents)
        self._vjp = vjp
        self.requires_grad = bool(requires_grad)
        self.op = op

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

    def item(self):
        return self.data.item()

    def detach(self):
        """Return a constant tensor sharing this tensor's array."""
        return Tensor(self.data, (), None, False, "const")

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def constant(x, dtype=None):
    """Wrap an array as a non-differentiable graph constant."""
    return Tensor(np.asarray(x, dtype=dtype), (), None, False, "const")


def leaf(x, dtype=None):
    """Wrap an array as a differentiable leaf (an optimizable parameter)."""
    return Tensor(np.asarray(x, dtype=dtype), (), None, True, "leaf")


def track(a):
    """Identity that marks its output as a differentiation root.

    grad() silently returns zeros for tensors that nothing upstream
    differentiates; spatial gradient roots (ray sample points with fixed
    poses, regularizer probe points) must opt in explicitly.  Gradients
    still flow through to the input when it is itself tracked.
    """

    def vjp(g, needed):
        return (g if needed[0] else None,)

    if not _GRAD_ENABLED:
        return Tensor(a.data, (), None, False, "track")
    out = Tensor(a.data, (a,), vjp, True, "track")
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._record(out, lambda x: x, (a,))
    return out


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), (), None, False, "const")


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Records every op executed inside the context, for later replay.

    Replay re-executes the recorded operations in their original order,
    optionally substituting new arrays for registered input tensors.
    With identical inputs the replayed arrays are bit-identical to the
    original forward pass, which is what makes checkpoint determinism
    testable.
    """

    def __init__(self):
        self.entries = []  # (out_id, fn, parent_ids, snapshot)
        self._watched = {}

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def watch(self, tensor, name):
        """Register a tensor whose array may be swapped at replay time."""
        self._watched[name] = id(tensor)

    def _record(self, out, fn, parents):
        snap = tuple(p.data for p in parents)
        self.entries.append((id(out), fn, tuple(id(p) for p in parents), snap))

    def replay(self, feeds=None, outputs=None):
        """Re-execute the tape.

        Args:
            feeds: optional dict name -> ndarray for tensors registered
                with ``watch``.
            outputs: optional list of tensors recorded on this tape whose
                replayed arrays should be returned.

        Returns:
            List of replayed ndarrays for ``outputs`` (empty if None).
        """
        env = {}
        if feeds:
            for name, arr in feeds.items():
                if name not in self._watched:
                    raise KeyError(f"no watched tensor named {name!r}")
                env[self._watched[name]] = np.asarray(arr)
        for out_id, fn, parent_ids, snap in self.entries:
            args = [env.get(pid, snap[i]) for i, pid in enumerate(parent_ids)]
            env[out_id] = fn(*args)
        if outputs is None:
            return []
        return [env[id(t)] for t in outputs]


_ACTIVE_TAPE = None


def _node(data, parents, vjp, op, replay_fn=None):
    """Create a graph node, honoring grad mode and the active tape."""
    if not _GRAD_ENABLED:
        out = Tensor(data, (), None, False, op)
    else:
        req = any(p.requires_grad for p in parents)
        if req:
            out = Tensor(data, parents, vjp, True, op)
        else:
            out = Tensor(data, (), None, False, op)
    if _ACTIVE_TAPE is not None and replay_fn is not None:
        _ACTIVE_TAPE._record(out, replay_fn, parents)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _sum_to(g, shape):
    """Reduce ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


def broadcast_to(a, shape):
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)

    def vjp(g, needed):
        return (_sum_to(g, a.shape),)

    return _node(data, (a,), vjp, "broadcast", lambda x: np.broadcast_to(x, shape))


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    data = a.data + b.data

    def vjp(g, needed):
        da = _sum_to(g, a.shape) if needed[0] else None
        db = _sum_to(g, b.shape) if needed[1] else None
        return da, db

    return _node(data, (a, b), vjp, "add", lambda x, y: x + y)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    data = a.data - b.data

    def vjp(g, needed):
        da = _sum_to(g, a.shape) if needed[0] else None
        db = _sum_to(neg(g), b.shape) if needed[1] else None
        return da, db

    return _node(data, (a, b), vjp, "sub", lambda x, y: x - y)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    data = a.data * b.data

    def vjp(g, needed):
        da = _sum_to(mul(g, b), a.shape) if needed[0] else None
        db = _sum_to(mul(g, a), b.shape) if needed[1] else None
        return da, db

    return _node(data, (a, b), vjp, "mul", lambda x, y: x * y)


def div(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    data = a.data / b.data

    def vjp(g, needed):
        da = _sum_to(div(g, b), a.shape) if needed[0] else None
        db = None
        if needed[1]:
            db = _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return da, db

    return _node(data, (a, b), vjp, "div", lambda x, y: x / y)


def neg(a):
    def vjp(g, needed):
        return (neg(g),)

    return _node(-a.data, (a,), vjp, "neg", lambda x: -x)


def power(a, p):
    """Elementwise power with a constant exponent."""
    p = float(p)
    data = a.data**p

    def vjp(g, needed):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _node(data, (a,), vjp, "pow", lambda x: x**p)


def exp(a):
    data = np.exp(a.data)
    ref = []  # weakref to the output; a strong ref would be a cycle

    def vjp(g, needed):
        return (mul(g, ref[0]()),)

    out = _node(data, (a,), vjp, "exp", np.exp)
    ref.append(weakref.ref(out))
    return out


def log(a):
    def vjp(g, needed):
        return (div(g, a),)

    return _node(np.log(a.data), (a,), vjp, "log", np.log)


def sqrt(a):
    data = np.sqrt(a.data)
    ref = []

    def vjp(g, needed):
        return (div(g, mul(ref[0](), 2.0)),)

    out = _node(data, (a,), vjp, "sqrt", np.sqrt)
    ref.append(weakref.ref(out))
    return out


def sin(a):
    def vjp(g, needed):
        return (mul(g, cos(a)),)

    return _node(np.sin(a.data), (a,), vjp, "sin", np.sin)


def cos(a):
    def vjp(g, needed):
        return (neg(mul(g, sin(a))),)

    return _node(np.cos(a.data), (a,), vjp, "cos", np.cos)


def _sigmoid_raw(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    data = _sigmoid_raw(a.data)
    ref = []

    def vjp(g, needed):
        s = ref[0]()
        return (mul(g, mul(s, sub(1.0, s))),)

    out = _node(data, (a,), vjp, "sigmoid", _sigmoid_raw)
    ref.append(weakref.ref(out))
    return out


def softplus(a, beta=1.0):
    """log(1 + exp(beta x)) / beta, computed without overflow."""
    beta = float(beta)

    def fwd(x):
        z = beta * x
        return (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / beta

    data = fwd(a.data)

    def vjp(g, needed):
        return (mul(g, sigmoid(mul(a, beta))),)

    return _node(data, (a,), vjp, "softplus", fwd)


def relu(a):
    cache = {}

    def vjp(g, needed):
        if "m" not in cache:
            cache["m"] = (a.data > 0).astype(a.data.dtype)
        return (mul(g, constant(cache["m"])),)

    return _node(np.maximum(a.data, 0.0), (a,), vjp, "relu",
                 lambda x: np.maximum(x, 0.0))


def absolute(a):
    cache = {}

    def vjp(g, needed):
        if "s" not in cache:
            cache["s"] = np.sign(a.data)
        return (mul(g, constant(cache["s"])),)

    return _node(np.abs(a.data), (a,), vjp, "abs", np.abs)


def maximum(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    mask = (a.data >= b.data).astype(a.data.dtype)

    def vjp(g, needed):
        da = _sum_to(mul(g, constant(mask)), a.shape) if needed[0] else None
        db = _sum_to(mul(g, constant(1.0 - mask)), b.shape) if needed[1] else None
        return da, db

    return _node(np.maximum(a.data, b.data), (a, b), vjp, "maximum", np.maximum)


def minimum(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    mask = (a.data <= b.data).astype(a.data.dtype)

    def vjp(g, needed):
        da = _sum_to(mul(g, constant(mask)), a.shape) if needed[0] else None
        db = _sum_to(mul(g, constant(1.0 - mask)), b.shape) if needed[1] else None
        return da, db

    return _node(np.minimum(a.data, b.data), (a, b), vjp, "minimum", np.minimum)


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


def where(cond, a, b):
    """Select ``a`` where a boolean array ``cond`` holds, else ``b``.

    ``cond`` is data, not a graph node; gradients flow into both branches
    through the masked products.
    """
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    m = np.asarray(cond).astype(a.dtype)
    mc = constant(m)
    return add(mul(a, mc), mul(b, constant(1.0 - m)))


# ---------------------------------------------------------------------------
# reductions and shaping


def sum_(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g, needed):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * len(in_shape)), in_shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(in_shape) for ax in axes)
        if not keepdims:
            kept = [1 if i in axes else s for i, s in enumerate(in_shape)]
            g = reshape(g, tuple(kept))
        return (broadcast_to(g, in_shape),)

    return _node(data, (a,), vjp, "sum", lambda x: x.sum(axis=axis, keepdims=keepdims))


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return div(sum_(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    shape = tuple(shape)
    in_shape = a.shape

    def vjp(g, needed):
        return (reshape(g, in_shape),)

    return _node(a.data.reshape(shape), (a,), vjp, "reshape", lambda x: x.reshape(shape))


def swapaxes(a, ax1, ax2):
    def vjp(g, needed):
        return (swapaxes(g, ax1, ax2),)

    return _node(np.swapaxes(a.data, ax1, ax2), (a,), vjp, "swapaxes", lambda x: np.swapaxes(x, ax1, ax2))


def matmul(a, b):
    """Matrix product; 2-D or equal-rank batched operands (no batch broadcast)."""
    if a.ndim != b.ndim:
        raise ValueError("matmul operands must have equal rank")
    if a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError("matmul batch dims must match exactly")
    data = np.matmul(a.data, b.data)

    def vjp(g, needed):
        da = matmul(g, swapaxes(b, -1, -2)) if needed[0] else None
        db = matmul(swapaxes(a, -1, -2), g) if needed[1] else None
        return da, db

    return _node(data, (a, b), vjp, "matmul", np.matmul)


def concat(parts, axis=0):
    parts = tuple(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g, needed):
        grads = []
        for i in range(len(parts)):
            if not needed[i]:
                grads.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(getitem(g, tuple(idx)))
        return tuple(grads)

    return _node(data, parts, vjp, "concat", lambda *xs: np.concatenate(xs, axis=axis))


def stack(parts, axis=0):
    return concat([reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts], axis=axis)


def getitem(a, idx):
    """Basic indexing (ints and slices only); advanced indexing is out of scope."""
    data = a.data[idx]
    in_shape = a.shape

    def vjp(g, needed):
        return (_put(g, in_shape, idx),)

    return _node(data, (a,), vjp, "getitem", lambda x: x[idx])


def _put(g, shape, idx):
    """Adjoint of basic indexing: embed ``g`` into zeros of ``shape``."""
    def fwd(garr):
        out = np.zeros(shape, dtype=garr.dtype)
        out[idx] = garr
        return out

    def vjp(u, needed):
        return (getitem(u, idx),)

    return _node(fwd(g.data), (g,), vjp, "put", fwd)


def flip(a, axis):
    def vjp(g, needed):
        return (flip(g, axis),)

    return _node(np.flip(a.data, axis=axis), (a,), vjp, "flip", lambda x: np.flip(x, axis=axis))


def cumsum(a, axis):
    def vjp(g, needed):
        return (flip(cumsum(flip(g, axis), axis), axis),)

    return _node(np.cumsum(a.data, axis=axis), (a,), vjp, "cumsum", lambda x: np.cumsum(x, axis=axis))


def index_select(a, idx, axis=0):
    """Gather rows of ``a`` along ``axis`` by an integer index array."""
    idx = np.asarray(idx, dtype=np.int64)
    in_shape = a.shape

    def vjp(g, needed):
        return (_index_put(g, idx, in_shape, axis),)

    return _node(
        np.take(a.data, idx, axis=axis),
        (a,),
        vjp,
        "index_select",
        lambda x: np.take(x, idx, axis=axis),
    )


def _index_put(g, idx, shape, axis):
    """Adjoint of gather: scatter-add rows of ``g`` into zeros of ``shape``."""
    def fwd(garr):
        out = np.zeros(shape, dtype=garr.dtype)
        np.add.at(out, (slice(None),) * axis + (idx,), garr)
        return out

    def vjp(u, needed):
        return (index_select(u, idx, axis=axis),)

    return _node(fwd(g.data), (g,), vjp, "index_put", fwd)


# ---------------------------------------------------------------------------
# trilinear grid sampling


class GridGeom:
    """World geometry of a dense voxel vertex grid.

    Attributes:
        origin: world position of vertex (0, 0, 0), shape (3,).
        voxel_size: edge length in meters (isotropic).
        dims: vertex counts (nx, ny, nz); cell counts are dims - 1.
    """

    __slots__ = ("origin", "voxel_size", "dims")

    def __init__(self, origin, voxel_size, dims):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        if any(d < 2 for d in self.dims):
            raise ValueError("grid needs at least 2 vertices per axis")

    @property
    def n_vertices(self):
        nx, ny, nz = self.dims
        return nx * ny * nz

    def world_max(self):
        return self.origin + self.voxel_size * (np.array(self.dims) - 1)


# corner enumeration: k = 4*dx + 2*dy + dz, matching the feature ordering
# (000, 001, 010, 011, 100, 101, 110, 111)
_CORNER_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64
)


def _locate(points, geom):
    """Map world points to (cell index, in-cell fraction); bounds-checked."""
    local = (points - geom.origin) / geom.voxel_size
    dims = np.array(geom.dims)
    eps = 1e-9 * max(geom.dims)
    if np.any(local < -eps) or np.any(local > (dims - 1) + eps):
        bad = np.where((local < -eps).any(axis=-1) | (local > (dims - 1) + eps).any(axis=-1))[0]
        raise GridBoundsError(
            f"{bad.size} sample point(s) outside grid box, first offender index {bad[0]}"
        )
    cell = np.minimum(np.floor(local).astype(np.int64), dims - 2)
    cell = np.maximum(cell, 0)
    frac = local - cell
    return cell, frac


def _flat_corner_index(cell, geom):
    nx, ny, nz = geom.dims
    flat = (cell[:, 0] * ny + cell[:, 1]) * nz + cell[:, 2]
    offs = (_CORNER_OFFSETS[:, 0] * ny + _CORNER_OFFSETS[:, 1]) * nz + _CORNER_OFFSETS[:, 2]
    return flat[:, None] + offs[None, :]


def _corner_weights(frac):
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    wx = np.stack([1.0 - fx, fx], axis=1)
    wy = np.stack([1.0 - fy, fy], axis=1)
    wz = np.stack([1.0 - fz, fz], axis=1)
    w = wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]
    return w.reshape(frac.shape[0], 8)


def _corner_jacobian(frac):
    """d weight_k / d frac_axis, shape (N, 8, 3), in cell-local units."""
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    wx = np.stack([1.0 - fx, fx], axis=1)
    wy = np.stack([1.0 - fy, fy], axis=1)
    wz = np.stack([1.0 - fz, fz], axis=1)
    sx = np.stack([-np.ones_like(fx), np.ones_like(fx)], axis=1)
    jx = (sx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    jy = (wx[:, :, None, None] * sx[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    jz = (wx[:, :, None, None] * wy[:, None, :, None] * sx[:, None, None, :]).reshape(-1, 8)
    return np.stack([jx, jy, jz], axis=2)


def _pair_hessian(v, frac):
    """Off-diagonal Hessian entries of trilinear interpolation.

    Args:
        v: per-corner scalars (N, 8), already contracted over channels.
        frac: in-cell fractions (N, 3).

    Returns:
        (h12, h13, h23), each (N,), in cell-local units.  The diagonal of
        the in-cell Hessian is identically zero.
    """
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    h12 = (1.0 - fz) * (v[:, 0] + v[:, 6] - v[:, 2] - v[:, 4]) + fz * (
        v[:, 1] + v[:, 7] - v[:, 3] - v[:, 5]
    )
    h13 = (1.0 - fy) * (v[:, 0] + v[:, 5] - v[:, 1] - v[:, 4]) + fy * (
        v[:, 2] + v[:, 7] - v[:, 3] - v[:, 6]
    )
    h23 = (1.0 - fx) * (v[:, 0] + v[:, 3] - v[:, 1] - v[:, 2]) + fx * (
        v[:, 4] + v[:, 7] - v[:, 5] - v[:, 6]
    )
    return h12, h13, h23


def _scatter_corners(idx8, vals, n_vertices, n_channels):
    """Sum (N, 8, C) values into an (V, C) array at flat vertex indices."""
    flat = idx8[:, :, None] * n_channels + np.arange(n_channels, dtype=np.int64)
    out = np.bincount(
        flat.ravel(), weights=vals.ravel(), minlength=n_vertices * n_channels
    )
    return out.reshape(n_vertices, n_channels).astype(vals.dtype)


@njit(cache=True)
def _nb_gather_weighted(feat, idx8, w8):
    """out[n, c] = sum_k w8[n, k] * feat[idx8[n, k], c]."""
    n, c = idx8.shape[0], feat.shape[1]
    out = np.zeros((n, c), dtype=feat.dtype)
    for i in range(n):
        for k in range(8):
            row = idx8[i, k]
            wk = w8[i, k]
            for j in range(c):
                out[i, j] += wk * feat[row, j]
    return out


@njit(cache=True)
def _nb_scatter_weighted(idx8, w8, g, n_vertices):
    """out[idx8[n, k], c] += w8[n, k] * g[n, c]; fixed order, sequential."""
    n, c = g.shape
    out = np.zeros((n_vertices, c), dtype=g.dtype)
    for i in range(n):
        for k in range(8):
            row = idx8[i, k]
            wk = w8[i, k]
            for j in range(c):
                out[row, j] += wk * g[i, j]
    return out


@njit(cache=True)
def _nb_dx_forward(feat, idx8, frac, g, inv_vs):
    """Gradient of <interp(feat, x), g> w.r.t. x, plus the contracted
    corner values gc[n, k] = sum_c feat[idx8[n, k], c] * g[n, c]."""
    n, c = g.shape
    out = np.zeros((n, 3), dtype=g.dtype)
    gc = np.zeros((n, 8), dtype=g.dtype)
    for i in range(n):
        fx, fy, fz = frac[i, 0], frac[i, 1], frac[i, 2]
        for k in range(8):
            row = idx8[i, k]
            acc = 0.0
            for j in range(c):
                acc += feat[row, j] * g[i, j]
            gc[i, k] = acc
            wx = fx if k & 4 else 1.0 - fx
            wy = fy if k & 2 else 1.0 - fy
            wz = fz if k & 1 else 1.0 - fz
            sx = 1.0 if k & 4 else -1.0
            sy = 1.0 if k & 2 else -1.0
            sz = 1.0 if k & 1 else -1.0
            out[i, 0] += acc * sx * wy * wz
            out[i, 1] += acc * wx * sy * wz
            out[i, 2] += acc * wx * wy * sz
        out[i, 0] *= inv_vs
        out[i, 1] *= inv_vs
        out[i, 2] *= inv_vs
    return out, gc


@njit(cache=True)
def _nb_ju_from_frac(frac, u, inv_vs):
    """ju[n, k] = sum_a (d w_k / d x_a) * u[n, a], in world units."""
    n = frac.shape[0]
    ju = np.zeros((n, 8), dtype=u.dtype)
    for i in range(n):
        fx, fy, fz = frac[i, 0], frac[i, 1], frac[i, 2]
        u0, u1, u2 = u[i, 0] * inv_vs, u[i, 1] * inv_vs, u[i, 2] * inv_vs
        for k in range(8):
            wx = fx if k & 4 else 1.0 - fx
            wy = fy if k & 2 else 1.0 - fy
            wz = fz if k & 1 else 1.0 - fz
            sx = 1.0 if k & 4 else -1.0
            sy = 1.0 if k & 2 else -1.0
            sz = 1.0 if k & 1 else -1.0
            ju[i, k] = sx * wy * wz * u0 + wx * sy * wz * u1 + wx * wy * sz * u2
    return ju


def grid_sample(features, points, geom):
    """Trilinearly interpolate grid vertex features at world points.

    Args:
        features: Tensor (V, C), V = prod(geom.dims), C-order vertex layout.
        points: Tensor (N, 3) world positions inside the grid box.
        geom: GridGeom describing the vertex lattice.

    Returns:
        Tensor (N, C).  Differentiable in both arguments, including one
        further differentiation of the resulting gradients.
    """
    cell, frac = _locate(points.data, geom)
    idx8 = _flat_corner_index(cell, geom)
    w8 = _corner_weights(frac)
    data = _nb_gather_weighted(features.data, idx8, w8)

    def vjp(g, needed):
        d_feat = _scatter_op(g, points, geom, idx8, w8) if needed[0] else None
        d_pts = _grid_dx_op(features, points, g, geom, idx8, frac) if needed[1] else None
        return d_feat, d_pts

    def replay(farr, parr):
        c2, f2 = _locate(parr, geom)
        i2 = _flat_corner_index(c2, geom)
        return _nb_gather_weighted(farr, i2, _corner_weights(f2))

    return _node(data, (features, points), vjp, "grid_sample", replay)


def _scatter_op(g, points, geom, idx8, w8):
    """Adjoint of grid_sample w.r.t. features: scatter weighted cotangents."""
    V = geom.n_vertices
    data = _nb_scatter_weighted(idx8, w8, g.data, V)

    def vjp(u, needed):
        # d/dg <scatter(g, x), u> = gather(u, x); d/dx is the mixed block.
        d_g = None
        if needed[0]:
            d_g = _terminal(
                _nb_gather_weighted(u.data, idx8, w8), (u, points), "grid_gather"
            )
        d_pts = _grid_dx_op(u, points, g, geom, idx8, None) if needed[1] else None
        return d_g, d_pts

    def replay(garr, parr):
        c2, f2 = _locate(parr, geom)
        i2 = _flat_corner_index(c2, geom)
        return _nb_scatter_weighted(i2, _corner_weights(f2), garr, V)

    return _node(data, (g, points), vjp, "grid_scatter", replay)


def _grid_dx_op(features, points, g, geom, idx8, frac):
    """Position gradient of <grid_sample(features, x), g>, shape (N, 3).

    This node is where the interpolation's second-order structure lives:
    its own vjp supplies the mixed feature/position block (via the
    transpose identity of d weights / d x), the position/position block
    (zero-diagonal in-cell Hessian), and the block w.r.t. the cotangent.
    """
    if frac is None:
        _, frac = _locate(points.data, geom)
    vs = geom.voxel_size
    data, gc = _nb_dx_forward(features.data, idx8, frac, g.data, 1.0 / vs)
    V = geom.n_vertices

    def vjp(u, needed):
        uarr = u.data  # (N, 3)
        d_feat = d_pts = d_g = None
        ju = None
        if needed[0] or needed[2]:
            ju = _nb_ju_from_frac(frac, uarr, 1.0 / vs)  # (N, 8)
        if needed[0]:
            d_feat = _terminal(
                _nb_scatter_weighted(idx8, ju, g.data, V),
                (u, points, g), "grid_dx_dfeat",
            )
        if needed[1]:
            h12, h13, h23 = _pair_hessian(gc, frac)
            s = vs * vs
            out = np.empty_like(uarr)
            out[:, 0] = (h12 * uarr[:, 1] + h13 * uarr[:, 2]) / s
            out[:, 1] = (h12 * uarr[:, 0] + h23 * uarr[:, 2]) / s
            out[:, 2] = (h13 * uarr[:, 0] + h23 * uarr[:, 1]) / s
            d_pts = _terminal(out, (u, points), "grid_dx_dx")
        if needed[2]:
            d_g = _terminal(
                _nb_gather_weighted(features.data, idx8, ju),
                (u, points), "grid_dx_dg",
            )
        return d_feat, d_pts, d_g

    def replay(farr, parr, garr):
        c2, f2 = _locate(parr, geom)
        i2 = _flat_corner_index(c2, geom)
        return _nb_dx_forward(farr, i2, f2, garr, 1.0 / vs)[0]

    return _node(data, (features, points, g), vjp, "grid_dx", replay)


def _terminal(data, parents, op):
    """A node whose further differentiation is out of contract."""

    def vjp(g, needed):
        raise GradOrderError(
            f"third-order derivative requested through grid op '{op}'"
        )

    return _node(data, parents, vjp, op)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(output, wrt_ids):
    """Ancestors of ``output`` ordered parents-first, plus need-grad marks."""
    order = []
    state = {}  # id -> 0 visiting, 1 done
    stack = [(output, False)]
    while stack:
        node, processed = stack.pop()
        nid = id(node)
        if processed:
            state[nid] = 1
            order.append(node)
            continue
        if nid in state:
            continue
        state[nid] = 0
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in state:
                stack.append((p, False))
    needs = {}
    for node in order:  # parents precede children
        nid = id(node)
        needs[nid] = nid in wrt_ids or any(needs.get(id(p), False) for p in node.parents)
    return order, needs


def grad(output, wrt, grad_output=None, create_graph=False):
    """Gradients of ``output`` w.r.t. each tensor in ``wrt``.

    Args:
        output: Tensor to differentiate.
        wrt: sequence of tensors (leaves or intermediates) to differentiate
            against.
        grad_output: cotangent seed, same shape as output; defaults to ones
            (mandatory default only makes sense for scalar outputs, but any
            shape is accepted).
        create_graph: keep the returned gradients differentiable so they can
            appear inside a further loss.

    Returns:
        List of Tensors, one per entry of ``wrt`` (zeros if unreachable).
    """
    single = isinstance(wrt, Tensor)
    wrt_list = [wrt] if single else list(wrt)
    wrt_ids = {id(t) for t in wrt_list}
    if grad_output is None:
        seed = constant(np.ones_like(output.data))
    else:
        seed = grad_output if isinstance(grad_output, Tensor) else constant(grad_output)
    if seed.shape != output.shape:
        raise ValueError("grad_output shape must match output shape")

    order, needs = _toposort(output, wrt_ids)
    grads = {id(output): seed}
    for node in reversed(order):
        nid = id(node)
        if nid in wrt_ids:
            g = grads.get(nid)  # keep for result collection
        else:
            g = grads.pop(nid, None)
        if g is None or node._vjp is None or not node.parents:
            continue
        if not needs.get(nid, False):
            continue
        needed = tuple(
            p.requires_grad and needs.get(id(p), False) for p in node.parents
        )
        if not any(needed):
            continue
        parent_grads = node._vjp(g, needed)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if not create_graph:
                # Drop the vjp subgraph eagerly; holding cotangent parents
                # alive keeps every dense feature buffer resident at once.
                pg = pg.detach()
            pid = id(p)
            if pid in grads:
                if create_graph:
                    grads[pid] = add(grads[pid], pg)
                else:
                    grads[pid] = constant(grads[pid].data + pg.data)
            else:
                grads[pid] = pg

    results = []
    for t in wrt_list:
        g = grads.get(id(t))
        if g is None:
            g = constant(np.zeros_like(t.data))
        if not create_graph:
            g = g.detach()
        check_finite(g.data, "gradient")
        results.append(g)
    return results[0] if single else results
