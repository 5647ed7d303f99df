"""Tape-based reverse-mode automatic differentiation over dense tensors.

Every backward rule is itself expressed in the differentiable primitives
below, so gradients returned by :func:`grad` with ``create_graph=True`` are
ordinary graph nodes and can be differentiated again (double backward).
"""

from __future__ import annotations

import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeMismatchError(AutodiffError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(AutodiffError):
    """Numeric domain violation (e.g. log of a non-positive value)."""


_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Select the element type (float64 default, float32 for speed)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}, use float32 or float64")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction inside the block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Var:
    """A node in the computation graph owning one dense tensor.

    ``_parents`` is a tuple of ``(parent, vjp)`` pairs where ``vjp`` maps the
    incoming output gradient (a Var) to the gradient w.r.t. that parent,
    built out of the same primitives.
    """

    __slots__ = ("data", "requires_grad", "_parents")

    def __init__(self, data, requires_grad=False, _parents=()):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Var":
        return Var(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=_default_dtype))


def constant(x) -> Var:
    """A graph leaf that never receives a gradient."""
    return Var(np.asarray(x, dtype=_default_dtype))


def _make(data, parents) -> Var:
    """Create an op output node, dropping the tape when grads are off."""
    if _grad_enabled:
        tracked = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
        if tracked:
            return Var(data, requires_grad=True, _parents=tracked)
    return Var(data)


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise / linear primitives
# ---------------------------------------------------------------------------

def broadcast_to(x, shape) -> Var:
    x = as_var(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeMismatchError(
            f"broadcast_to: cannot broadcast {x.shape} to {shape}")
    src_shape = x.shape
    return _make(data, ((x, lambda g: sum_to_shape(g, src_shape)),))


def sum_to_shape(x, shape) -> Var:
    """Sum over axes that were expanded by broadcasting to get back `shape`."""
    x = as_var(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    ndim_extra = len(x.shape) - len(shape)
    if ndim_extra < 0:
        raise ShapeMismatchError(f"sum_to_shape: {x.shape} cannot reduce to {shape}")
    axes = tuple(range(ndim_extra)) + tuple(
        i + ndim_extra for i, n in enumerate(shape) if n == 1 and x.shape[i + ndim_extra] != 1)
    data = x.data.sum(axis=axes, keepdims=False)
    data = data.reshape(shape)
    src_shape = x.shape
    return _make(data, ((x, lambda g: broadcast_to(g, src_shape)),))


def _broadcast_pair(a, b):
    a, b = as_var(a), as_var(b)
    if a.shape == b.shape:
        return a, b
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"shapes {a.shape} and {b.shape} do not broadcast")
    return broadcast_to(a, shape), broadcast_to(b, shape)


def add(a, b) -> Var:
    a, b = _broadcast_pair(a, b)
    return _make(a.data + b.data, ((a, lambda g: g), (b, lambda g: g)))


def neg(x) -> Var:
    x = as_var(x)
    return _make(-x.data, ((x, lambda g: neg(g)),))


def sub(a, b) -> Var:
    return add(a, neg(b))


def mul(a, b) -> Var:
    a, b = _broadcast_pair(a, b)
    return _make(a.data * b.data,
                 ((a, lambda g: mul(g, b)), (b, lambda g: mul(g, a))))


def scalar_mul(x, s: float) -> Var:
    x = as_var(x)
    s = float(s)
    return _make(x.data * s, ((x, lambda g: scalar_mul(g, s)),))


def scalar_add(x, s: float) -> Var:
    x = as_var(x)
    return _make(x.data + float(s), ((x, lambda g: g),))


def exp(x) -> Var:
    x = as_var(x)
    data = np.exp(x.data)
    if not np.all(np.isfinite(data)):
        raise DomainError("exp: overflow to non-finite values")
    out = _make(data, ((x, lambda g: mul(g, out)),))
    return out


def log(x) -> Var:
    x = as_var(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: input contains non-positive values")
    return _make(np.log(x.data), ((x, lambda g: mul(g, power(x, -1.0))),))


def power(x, c: float) -> Var:
    """x ** c with constant exponent; non-integer c requires x > 0."""
    x = as_var(x)
    c = float(c)
    if not c.is_integer() and np.any(x.data <= 0.0):
        raise DomainError(f"power: non-integer exponent {c} on non-positive input")
    if c < 0 and np.any(x.data == 0.0):
        raise DomainError(f"power: negative exponent {c} on zero input")
    data = np.power(x.data, c)
    return _make(data, ((x, lambda g: mul(g, scalar_mul(power(x, c - 1.0), c))),))


def relu(x) -> Var:
    x = as_var(x)
    mask = constant((x.data > 0).astype(_default_dtype))
    return _make(np.maximum(x.data, 0.0), ((x, lambda g: mul(g, mask)),))


def sigmoid(x) -> Var:
    x = as_var(x)
    # numerically stable in both tails
    data = np.where(x.data >= 0,
                    1.0 / (1.0 + np.exp(-np.abs(x.data))),
                    np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    out = _make(data, ((x, lambda g: mul(g, mul(out, scalar_add(neg(out), 1.0)))),))
    return out


def maximum_const(x, c: float) -> Var:
    """Elementwise max(x, c); subgradient 0 where x <= c."""
    x = as_var(x)
    c = float(c)
    mask = constant((x.data > c).astype(_default_dtype))
    return _make(np.maximum(x.data, c), ((x, lambda g: mul(g, mask)),))


def clip(x, lo: float, hi: float) -> Var:
    x = as_var(x)
    mask = constant(((x.data > lo) & (x.data < hi)).astype(_default_dtype))
    return _make(np.clip(x.data, lo, hi), ((x, lambda g: mul(g, mask)),))


def vsum(x) -> Var:
    """Sum of all elements, returning a scalar node."""
    x = as_var(x)
    src_shape = x.shape
    return _make(x.data.sum(), ((x, lambda g: broadcast_to(g, src_shape)),))


def mean(x) -> Var:
    x = as_var(x)
    return scalar_mul(vsum(x), 1.0 / x.size)


def reshape(x, shape) -> Var:
    x = as_var(x)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeMismatchError(f"reshape: {x.shape} has {x.size} elements, target {shape}")
    src_shape = x.shape
    return _make(x.data.reshape(shape), ((x, lambda g: reshape(g, src_shape)),))


def flatten(x) -> Var:
    x = as_var(x)
    return reshape(x, (x.size,))


def transpose(x, axes) -> Var:
    x = as_var(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)),
                 ((x, lambda g: transpose(g, inv)),))


def matmul(a, b) -> Var:
    """Strict 2-D matrix product."""
    a, b = as_var(a), as_var(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data,
                 ((a, lambda g: matmul(g, transpose(b, (1, 0)))),
                  (b, lambda g: matmul(transpose(a, (1, 0)), g))))


def dot(u, v) -> Var:
    u, v = as_var(u), as_var(v)
    _check_same_shape(u, v, "dot")
    return vsum(mul(u, v))


def concat(parts) -> Var:
    """Concatenate 1-D vectors into one vector."""
    parts = [as_var(p) for p in parts]
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeMismatchError(f"concat: expected 1-D parts, got {p.shape}")
    data = np.concatenate([p.data for p in parts])
    offsets = np.cumsum([0] + [p.size for p in parts])
    parent_entries = []
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        parent_entries.append((p, _make_slice_vjp(int(lo), int(hi))))
    return _make(data, tuple(parent_entries))


def _make_slice_vjp(lo, hi):
    return lambda g: slice1d(g, lo, hi)


def slice1d(x, lo: int, hi: int) -> Var:
    """Contiguous slice of a 1-D vector."""
    x = as_var(x)
    if x.data.ndim != 1 or not (0 <= lo <= hi <= x.size):
        raise ShapeMismatchError(f"slice1d: bad range [{lo}, {hi}) for shape {x.shape}")
    n = x.size

    def vjp(g):
        left = constant(np.zeros(lo, dtype=g.data.dtype))
        right = constant(np.zeros(n - hi, dtype=g.data.dtype))
        return concat([left, g, right])

    return _make(x.data[lo:hi].copy(), ((x, vjp),))


def l2_norm(x, eps: float = 0.0) -> Var:
    """Euclidean norm; with eps > 0 this is max(||x||, eps), differentiably."""
    x = as_var(x)
    sq = vsum(mul(x, x))
    if eps > 0.0:
        sq = maximum_const(sq, eps * eps)
    elif np.all(x.data == 0.0):
        raise DomainError("l2_norm: zero vector has no differentiable norm (pass eps)")
    return power(sq, 0.5)


# ---------------------------------------------------------------------------
# convolution primitives (im2col / col2im are mutual adjoints)
# ---------------------------------------------------------------------------

def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col_forward(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = _conv_out_size(h, k, stride, pad), _conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, Ho, Wo, k, k) -> (C*k*k, N*Ho*Wo)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    return np.ascontiguousarray(cols)


def _col2im_forward(cols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    ho, wo = _conv_out_size(h, k, stride, pad), _conv_out_size(w, k, stride, pad)
    win = cols.reshape(c, k, k, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += win[:, :, i, j]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def im2col(x, k: int, stride: int, pad: int) -> Var:
    x = as_var(x)
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"im2col: expected NCHW input, got {x.shape}")
    src_shape = x.shape
    data = _im2col_forward(x.data, k, stride, pad)
    return _make(data, ((x, lambda g: col2im(g, src_shape, k, stride, pad)),))


def col2im(cols, x_shape, k: int, stride: int, pad: int) -> Var:
    cols = as_var(cols)
    data = _col2im_forward(cols.data, x_shape, k, stride, pad)
    return _make(data, ((cols, lambda g: im2col(g, k, stride, pad)),))


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Var:
    """2-D cross-correlation, NCHW input, OIHW weight."""
    x, weight = as_var(x), as_var(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d: need 4-D input/weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if kh != kw:
        raise ShapeMismatchError(f"conv2d: non-square kernel {kh}x{kw}")
    if c != i:
        raise ShapeMismatchError(
            f"conv2d: input has {c} channels but weight expects {i}")
    k = kh
    ho, wo = _conv_out_size(h, k, stride, pad), _conv_out_size(w, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError(
            f"conv2d: non-positive output size {ho}x{wo} for input {h}x{w}, "
            f"kernel {k}, stride {stride}, pad {pad}")
    cols = im2col(x, k, stride, pad)                       # (C*k*k, N*Ho*Wo)
    wmat = reshape(weight, (o, c * k * k))
    out2 = matmul(wmat, cols)                              # (O, N*Ho*Wo)
    out = transpose(reshape(out2, (o, n, ho, wo)), (1, 0, 2, 3))
    if bias is not None:
        bias = as_var(bias)
        if bias.shape != (o,):
            raise ShapeMismatchError(f"conv2d: bias shape {bias.shape}, expected ({o},)")
        out = add(out, reshape(bias, (1, o, 1, 1)))
    return out


def conv2d_transpose(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Var:
    """Adjoint of conv2d: weight (I, O, k, k) maps I channels to O channels.

    Output spatial size is (H - 1) * stride - 2 * pad + k.
    """
    x, weight = as_var(x), as_var(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d_transpose: need 4-D input/weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    i, o, kh, kw = weight.shape
    if kh != kw:
        raise ShapeMismatchError(f"conv2d_transpose: non-square kernel {kh}x{kw}")
    if c != i:
        raise ShapeMismatchError(
            f"conv2d_transpose: input has {c} channels but weight expects {i}")
    k = kh
    ho = (h - 1) * stride - 2 * pad + k
    wo = (w - 1) * stride - 2 * pad + k
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError(f"conv2d_transpose: non-positive output size {ho}x{wo}")
    x2 = reshape(transpose(x, (1, 0, 2, 3)), (c, n * h * w))   # (I, N*H*W)
    wmat = reshape(weight, (i, o * k * k))
    cols = matmul(transpose(wmat, (1, 0)), x2)                 # (O*k*k, N*H*W)
    out = col2im(cols, (n, o, ho, wo), k, stride, pad)
    if bias is not None:
        bias = as_var(bias)
        if bias.shape != (o,):
            raise ShapeMismatchError(
                f"conv2d_transpose: bias shape {bias.shape}, expected ({o},)")
        out = add(out, reshape(bias, (1, o, 1, 1)))
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(prediction, target) -> Var:
    prediction = as_var(prediction)
    target = as_var(target).detach()
    _check_same_shape(prediction, target, "mse_loss")
    diff = sub(prediction, target)
    return mean(mul(diff, diff))


def bce_loss(prediction, target, eps: float = 1e-7) -> Var:
    prediction = as_var(prediction)
    target = as_var(target).detach()
    _check_same_shape(prediction, target, "bce_loss")
    p = clip(prediction, eps, 1.0 - eps)
    t = target
    one_minus_t = constant(1.0 - t.data)
    ll = add(mul(t, log(p)), mul(one_minus_t, log(sub(constant(1.0), p))))
    return neg(mean(ll))


def kl_div_gaussian(mu, logvar) -> Var:
    """-1/2 * mean over batch of sum_dims(1 + logvar - mu^2 - exp(logvar))."""
    mu, logvar = as_var(mu), as_var(logvar)
    _check_same_shape(mu, logvar, "kl_div_gaussian")
    batch = mu.shape[0] if mu.data.ndim > 0 else 1
    inner = sub(sub(scalar_add(logvar, 1.0), mul(mu, mu)), exp(logvar))
    return scalar_mul(vsum(inner), -0.5 / batch)


def cosine_similarity(u, v, eps: float = 1e-8) -> Var:
    """cos(u, v) with v treated as a constant and zero-norm guard eps."""
    u = as_var(u)
    v = as_var(v).detach()
    if u.data.ndim != 1 or v.data.ndim != 1 or u.size != v.size:
        raise ShapeMismatchError(
            f"cosine_similarity: need equal-length vectors, got {u.shape} and {v.shape}")
    if eps <= 0:
        raise ValueError("cosine_similarity: eps must be positive")
    nu = l2_norm(u, eps=eps)
    nv = max(float(np.linalg.norm(v.data)), eps)
    return scalar_mul(mul(dot(u, v), power(nu, -1.0)), 1.0 / nv)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(output, wrt, create_graph: bool = False):
    """Gradients of a scalar output w.r.t. each Var in `wrt`.

    With ``create_graph=True`` the returned Vars are differentiable graph
    nodes; otherwise they are constants. Parameter values are never mutated.
    Vars unreachable from the output get a zero gradient and a warning.
    """
    output = as_var(output)
    if output.size != 1:
        raise AutodiffError(f"grad: output must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    for i, w in enumerate(wrt):
        if not isinstance(w, Var) or not w.requires_grad:
            raise AutodiffError(f"grad: wrt[{i}] does not require grad")

    ctx = no_grad() if not create_graph else _nullcontext()
    with ctx:
        grads = {id(output): broadcast_to(constant(np.ones((), dtype=output.data.dtype)),
                                          output.shape)}
        keep = {id(output): output}
        for node in reversed(_topo_order(output)):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node._parents:
                if not parent.requires_grad:
                    continue
                contrib = vjp(g)
                pid = id(parent)
                if pid in grads:
                    grads[pid] = add(grads[pid], contrib)
                else:
                    grads[pid] = contrib
                    keep[pid] = parent

    results = []
    for i, w in enumerate(wrt):
        g = grads.get(id(w))
        if g is None:
            warnings.warn(f"grad: wrt[{i}] is unreachable from output; returning zeros",
                          RuntimeWarning, stacklevel=2)
            g = constant(np.zeros(w.shape, dtype=w.data.dtype))
        results.append(g if create_graph else g.detach())
    return results


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
