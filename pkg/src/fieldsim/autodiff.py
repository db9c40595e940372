"""Reverse-mode automatic differentiation over dense numpy tensors.

A Tape records op nodes in execution order (which is already a valid
topological order), and backward() walks them once in reverse. Tensors not
attached to a tape are constants; ops on constants evaluate eagerly without
recording, so the same model code serves both training and inference.

Only the ops needed by the fields, renderers and decoder are provided:
elementwise math, matmul, reductions, shape ops, gathers (including the
8-corner trilinear gather that feeds the feature grids), a 3x3 conv and 2x
nearest upsample for the image decoder, and two ray-segment ops
(segment_sum, ray_weights) used by the volume renderer. Broadcasting is
deliberately limited to scalar-tensor; use add_row for bias terms.
"""

from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = np.float64
CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    """Switch tensor precision globally (float64 default, float32 for speed)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError("default dtype must be float64 or float32")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tape:
    """Append-only op record; insertion order is the topological order."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.parameters: dict[str, Tensor] = {}

    def _record(self, t: "Tensor") -> None:
        t._id = len(self.nodes)
        self.nodes.append(t)

    def leaf(self, value, name: str | None = None) -> "Tensor":
        t = Tensor(np.asarray(value, dtype=_DEFAULT_DTYPE), tape=self)
        self._record(t)
        if name is not None:
            if name in self.parameters:
                raise ValueError(f"duplicate parameter name '{name}'")
            self.parameters[name] = t
        return t

    def backward(self, loss: "Tensor") -> None:
        """Populate .grad on every leaf reachable from loss.

        Registered parameters that the loss never touched get zero
        gradients, so optimizer steps stay well defined.
        """
        if loss._tape is not self:
            raise ValueError("loss does not belong to this tape")
        if loss.value.size != 1:
            raise ValueError("backward requires a scalar loss")
        grads: dict[int, np.ndarray] = {
            loss._id: np.ones_like(loss.value)
        }
        for node in reversed(self.nodes[: loss._id + 1]):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._parents:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or parent._tape is None:
                        continue
                    acc = grads.get(parent._id)
                    grads[parent._id] = pg if acc is None else acc + pg
            else:
                node.grad = node.grad + g if node.grad is not None else g
        for p in self.parameters.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.value)


class Tensor:
    """A dense array plus (when tracked) its position in a tape."""

    __slots__ = ("value", "grad", "_tape", "_id", "_parents", "_backward")

    def __init__(self, value: np.ndarray, tape: Tape | None = None,
                 parents=(), backward=None):
        self.value = value
        self.grad = None
        self._tape = tape
        self._id = -1
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        tag = "tracked" if self._tape is not None else "const"
        return f"Tensor({tag}, shape={self.value.shape})"

    # operator sugar; these stay thin wrappers over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=_DEFAULT_DTYPE))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


as_tensor = _as_tensor


def _result(op: str, value: np.ndarray, parents: tuple, backward) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    tapes = {p._tape for p in parents if p._tape is not None}
    if not tapes:
        return Tensor(value)
    if len(tapes) > 1:
        raise ValueError(f"op '{op}' mixes tensors from different tapes")
    tape = tapes.pop()
    t = Tensor(value, tape=tape, parents=parents, backward=backward)
    tape._record(t)
    return t


def _is_scalar_shaped(v: np.ndarray) -> bool:
    return v.ndim == 0


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.value.shape == b.value.shape:
        return
    if _is_scalar_shaped(a.value) or _is_scalar_shaped(b.value):
        return
    raise ValueError(
        f"op '{op}': shapes {a.value.shape} and {b.value.shape} differ "
        "(only scalar-tensor broadcasting is supported)")


def _reduce_to(grad: np.ndarray, v: np.ndarray) -> np.ndarray:
    # collapse a broadcasted gradient back onto a scalar-shaped operand
    if grad.shape == v.shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(v.shape)


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    av, bv = a.value, b.value

    def bw(g):
        return _reduce_to(g, av), _reduce_to(g, bv)

    return _result("add", av + bv, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    av, bv = a.value, b.value

    def bw(g):
        return _reduce_to(g, av), _reduce_to(-g, bv)

    return _result("sub", av - bv, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    av, bv = a.value, b.value

    def bw(g):
        return _reduce_to(g * bv, av), _reduce_to(g * av, bv)

    return _result("mul", av * bv, (a, b), bw)


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return _result("scalar_mul", a.value * c, (a,), bw)


def add_row(x, b) -> Tensor:
    """(N, M) + (M,) bias add — the one non-scalar broadcast, made explicit."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.value.ndim != 2 or b.value.shape != (x.value.shape[1],):
        raise ValueError(
            f"add_row expects (N, M) and (M,), got {x.value.shape} and {b.value.shape}")

    def bw(g):
        return g, g.sum(axis=0)

    return _result("add_row", x.value + b.value[None, :], (x, b), bw)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _stable_sigmoid(a.value)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _result("sigmoid", s, (a,), bw)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value

    def bw(g):
        return (g * _stable_sigmoid(av),)

    return _result("softplus", np.logaddexp(0.0, av), (a,), bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0

    def bw(g):
        return (g * mask,)

    return _result("relu", a.value * mask, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    ev = np.exp(a.value)

    def bw(g):
        return (g * ev,)

    return _result("exp", ev, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value

    def bw(g):
        return (g / av,)

    return _result("log", np.log(av), (a,), bw)


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value

    def bw(g):
        return (2.0 * g * av,)

    return _result("square", av * av, (a,), bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    sv = np.sqrt(a.value)

    def bw(g):
        return (g * (0.5 / sv),)

    return _result("sqrt", sv, (a,), bw)


def reciprocal(a) -> Tensor:
    a = _as_tensor(a)
    rv = 1.0 / a.value

    def bw(g):
        return (-g * rv * rv,)

    return _result("reciprocal", rv, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra, reductions, shape ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")

    def bw(g):
        return g @ bv.T, av.T @ g

    return _result("matmul", av @ bv, (a, b), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    av = a.value

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _result("sum", np.sum(av, axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    count = av.size if axis is None else np.prod(
        [av.shape[ax] for ax in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape) / count,)

    return _result("mean", np.mean(av, axis=axis, keepdims=keepdims), (a,), bw)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", np.concatenate([p.value for p in parts], axis=axis),
                   tuple(parts), bw)


def slice_(a, key) -> Tensor:
    """Basic indexing only (ints, slices, ellipsis); no fancy index arrays."""
    a = _as_tensor(a)
    av = a.value

    def bw(g):
        out = np.zeros_like(av)
        out[key] = g
        return (out,)

    return _result("slice", av[key].copy(), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    av = a.value

    def bw(g):
        return (g.reshape(av.shape),)

    return _result("reshape", av.reshape(shape).copy(), (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return (g.transpose(inv) if inv is not None else g.T,)

    return _result("transpose", a.value.transpose(axes).copy(), (a,), bw)


# ---------------------------------------------------------------------------
# gathers


def gather(a, idx, axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    av = a.value
    if axis != 0:
        raise ValueError("gather supports axis=0 only")

    def bw(g):
        out = np.zeros_like(av)
        flat = idx.ravel()
        gmat = g.reshape(flat.shape[0], -1)
        if av.ndim == 1:
            out += np.bincount(flat, weights=gmat[:, 0], minlength=av.shape[0])
        else:
            cols = out.reshape(av.shape[0], -1)
            for c in range(cols.shape[1]):
                cols[:, c] += np.bincount(flat, weights=gmat[:, c],
                                          minlength=av.shape[0])
        return (out,)

    return _result("gather", av[idx].copy(), (a,), bw)


def trilinear_gather(table, corner_ids, weights) -> Tensor:
    """Blend 8 grid-table rows per query: out[n] = sum_c w[n,c] * table[ids[n,c]].

    corner_ids is constant; gradients flow into the table (scatter-add over
    saved weights) and, when the weights are tape-tracked, into the weights.
    """
    table, weights = _as_tensor(table), _as_tensor(weights)
    ids = np.asarray(corner_ids, dtype=np.int64)
    tv, wv = table.value, weights.value
    if tv.ndim != 2 or ids.ndim != 2 or ids.shape[1] != 8 or wv.shape != ids.shape:
        raise ValueError("trilinear_gather expects table (T,F), ids (N,8), weights (N,8)")
    rows = tv[ids]                       # (N, 8, F)
    out = np.einsum("nc,ncf->nf", wv, rows)

    def bw(g):
        contrib = wv[:, :, None] * g[:, None, :]       # (N, 8, F)
        flat_ids = ids.ravel()
        flat = contrib.reshape(-1, tv.shape[1])
        dt = np.empty_like(tv)
        for f in range(tv.shape[1]):
            dt[:, f] = np.bincount(flat_ids, weights=flat[:, f],
                                   minlength=tv.shape[0])
        dw = None
        if weights._tape is not None:
            dw = np.einsum("ncf,nf->nc", rows, g)
        return dt, dw

    return _result("trilinear_gather", out, (table, weights), bw)


# ---------------------------------------------------------------------------
# image ops for the feature decoder


def conv2d(x, w, b) -> Tensor:
    """3x3, stride 1, pad 1 convolution on a (C, H, W) feature map."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 3 or wv.ndim != 4 or wv.shape[2:] != (3, 3):
        raise ValueError("conv2d expects x (C,H,W) and w (O,C,3,3)")
    cin, h, wd = xv.shape
    cout = wv.shape[0]
    if wv.shape[1] != cin or bv.shape != (cout,):
        raise ValueError("conv2d: channel mismatch")
    xp = np.pad(xv, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * 9, h * wd)
    wmat = wv.reshape(cout, cin * 9)
    out = (wmat @ cols + bv[:, None]).reshape(cout, h, wd)

    def bw(g):
        gmat = g.reshape(cout, h * wd)
        dw = (gmat @ cols.T).reshape(wv.shape)
        db = gmat.sum(axis=1)
        dcols = wmat.T @ gmat                                   # (C*9, H*W)
        # scatter columns back onto the padded input with one bincount
        ci, di, dj = np.meshgrid(np.arange(cin), np.arange(3), np.arange(3),
                                 indexing="ij")
        base = (ci * (h + 2) * (wd + 2) + di * (wd + 2) + dj).reshape(cin * 9, 1)
        ii, jj = np.divmod(np.arange(h * wd), wd)
        offset = (ii * (wd + 2) + jj)[None, :]
        flat = np.bincount((base + offset).ravel(), weights=dcols.ravel(),
                           minlength=cin * (h + 2) * (wd + 2))
        dx = flat.reshape(cin, h + 2, wd + 2)[:, 1:-1, 1:-1]
        return dx, dw, db

    return _result("conv2d", out, (x, w, b), bw)


def upsample_nearest(x) -> Tensor:
    """(C, H, W) -> (C, 2H, 2W) by pixel duplication."""
    x = _as_tensor(x)
    xv = x.value
    if xv.ndim != 3:
        raise ValueError("upsample_nearest expects (C, H, W)")
    out = np.repeat(np.repeat(xv, 2, axis=1), 2, axis=2)
    c, h, w = xv.shape

    def bw(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _result("upsample_nearest", out, (x,), bw)


# ---------------------------------------------------------------------------
# ray-segment ops: flat per-sample arrays grouped into variable-length rays


class Segments:
    """Constant description of how flat sample arrays pack into rays."""

    __slots__ = ("starts", "lengths", "rows", "pos", "total", "count", "max_len")

    def __init__(self, lengths):
        self.lengths = np.asarray(lengths, dtype=np.int64)
        self.count = int(self.lengths.shape[0])
        self.starts = np.concatenate(([0], np.cumsum(self.lengths)[:-1]))
        self.total = int(self.lengths.sum())
        self.rows = np.repeat(np.arange(self.count), self.lengths)
        self.pos = np.arange(self.total) - np.repeat(self.starts, self.lengths)
        self.max_len = int(self.lengths.max()) if self.count else 0


def segment_sum(x, seg: Segments) -> Tensor:
    """Sum flat per-sample values (N,) or (N, F) into per-ray totals."""
    x = _as_tensor(x)
    xv = x.value
    if xv.shape[0] != seg.total:
        raise ValueError("segment_sum: sample count does not match segments")
    nonempty = seg.lengths > 0
    out_shape = (seg.count,) + xv.shape[1:]
    out = np.zeros(out_shape, dtype=xv.dtype)
    if seg.total:
        sums = np.add.reduceat(xv, seg.starts[nonempty], axis=0)
        out[nonempty] = sums

    def bw(g):
        return (np.repeat(g, seg.lengths, axis=0),)

    return _result("segment_sum", out, (x,), bw)


def ray_weights(alpha, seg: Segments) -> Tensor:
    """Alpha-compositing weights w_i = a_i * prod_{j<i} (1 - a_j) per ray.

    Backward uses the reverse recurrence
        S_k = (1 - a_{k+1}) S_{k+1} + g_{k+1} a_{k+1},   dL/da_k = T_k (g_k - S_k)
    which avoids dividing by (1 - a) and so stays exact when alpha hits 1.
    """
    alpha = _as_tensor(alpha)
    av = alpha.value
    if av.ndim != 1 or av.shape[0] != seg.total:
        raise ValueError("ray_weights: alpha must be flat per-sample values")
    if seg.max_len == 0:
        return scalar_mul(alpha, 1.0)
    dense_a = np.zeros((seg.count, seg.max_len), dtype=av.dtype)
    dense_a[seg.rows, seg.pos] = av
    trans = np.cumprod(1.0 - dense_a[:, :-1], axis=1)
    dense_t = np.concatenate(
        [np.ones((seg.count, 1), dtype=av.dtype), trans], axis=1)
    w = (dense_a * dense_t)[seg.rows, seg.pos]

    def bw(g):
        dense_g = np.zeros_like(dense_a)
        dense_g[seg.rows, seg.pos] = g
        s = np.zeros_like(dense_a)
        for k in range(seg.max_len - 2, -1, -1):
            s[:, k] = ((1.0 - dense_a[:, k + 1]) * s[:, k + 1]
                       + dense_g[:, k + 1] * dense_a[:, k + 1])
        da = dense_t * (dense_g - s)
        return (da[seg.rows, seg.pos],)

    return _result("ray_weights", w, (alpha,), bw)


# ---------------------------------------------------------------------------


def grad_check(f, point: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    The scalar probe is sum(f(x)); the reported figure is
    max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
    """
    point = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(point)
    y = f(x)
    loss = tsum(y)
    tape.backward(loss)
    analytic = x.grad
    numeric = np.zeros_like(point)
    flat = point.ravel()
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(np.sum(f(constant(point)).value))
        flat[i] = orig - h
        lo = float(np.sum(f(constant(point)).value))
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck_suite(seed: int = 0) -> list[tuple[str, float]]:
    """(op name, max rel. error vs finite differences) for every tape op."""
    rng = np.random.default_rng(seed)

    def n(*shape):
        return rng.normal(size=shape)

    def pos(*shape):
        return np.abs(rng.normal(size=shape)) + 0.5

    seg = Segments([3, 0, 2, 4])
    b43 = n(4, 3)
    m34 = n(3, 4)
    idx = np.array([0, 2, 2, 1])
    corner_ids = rng.integers(0, 16, size=(5, 8))
    corner_w = rng.uniform(0.1, 1.0, size=(5, 8))
    table = n(16, 2)
    conv_x = n(2, 5, 6)
    conv_w = n(3, 2, 3, 3)
    conv_b = n(3)
    away_from_kink = np.sign(n(4, 3)) * pos(4, 3)

    cases = [
        ("add", lambda x: add(x, constant(b43)), n(4, 3)),
        ("sub", lambda x: sub(constant(b43), x), n(4, 3)),
        ("mul", lambda x: mul(x, constant(b43)), n(4, 3)),
        ("scalar_mul", lambda x: scalar_mul(x, -1.7), n(4, 3)),
        ("add_row", lambda x: add_row(constant(b43), x), n(3)),
        ("sigmoid", sigmoid, n(4, 3)),
        ("softplus", softplus, n(4, 3)),
        ("relu", relu, away_from_kink),
        ("exp", exp, n(4, 3)),
        ("log", log, pos(4, 3)),
        ("square", square, n(4, 3)),
        ("sqrt", sqrt, pos(4, 3)),
        ("reciprocal", reciprocal, np.sign(n(4, 3)) * pos(4, 3)),
        ("matmul_lhs", lambda x: matmul(x, constant(m34)), n(5, 3)),
        ("matmul_rhs", lambda x: matmul(constant(b43), x), n(3, 4)),
        ("tsum", lambda x: tsum(x, axis=0), n(4, 3)),
        ("tmean", lambda x: tmean(x, axis=1, keepdims=True), n(4, 3)),
        ("concat", lambda x: concat([x, constant(b43)], axis=1), n(4, 2)),
        ("slice", lambda x: slice_(x, (slice(1, 3), slice(0, 2))), n(4, 3)),
        ("reshape", lambda x: reshape(x, (6, 2)), n(4, 3)),
        ("transpose", lambda x: transpose(x, (1, 0)), n(4, 3)),
        ("gather", lambda x: gather(x, idx), n(5, 3)),
        ("trilinear_gather_table",
         lambda x: trilinear_gather(x, corner_ids, constant(corner_w)),
         table.copy()),
        ("trilinear_gather_weights",
         lambda x: trilinear_gather(constant(table), corner_ids, x),
         corner_w.copy()),
        ("conv2d_x", lambda x: conv2d(x, constant(conv_w), constant(conv_b)),
         conv_x.copy()),
        ("conv2d_w", lambda x: conv2d(constant(conv_x), x, constant(conv_b)),
         conv_w.copy()),
        ("conv2d_b", lambda x: conv2d(constant(conv_x), constant(conv_w), x),
         conv_b.copy()),
        ("upsample_nearest", upsample_nearest, n(2, 3, 4)),
        ("segment_sum", lambda x: segment_sum(x, seg), n(9, 2)),
        ("ray_weights", lambda x: ray_weights(x, seg),
         rng.uniform(0.1, 0.9, size=9)),
    ]
    return [(name, grad_check(f, point)) for name, f, point in cases]
