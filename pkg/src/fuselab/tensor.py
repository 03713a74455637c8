"""Dense NHWC tensors with reverse-mode automatic differentiation.

Every differentiable primitive the fusion network needs lives here: matrix
products, row softmax, the three convolution flavours (standard, depthwise,
2x2 transposed), per-position affine maps, leaky ReLU and a handful of
reshaping and reduction helpers.

Arrays are row-major numpy buffers with axis order (batch, height, width,
channel).  Each op records its parents and a closure that maps the output
gradient to input gradients; :meth:`Tensor.backward` walks that graph in
reverse topological order, visiting every node once.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NonFiniteError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_debug = os.environ.get("FUSELAB_DEBUG", "") not in ("", "0")
_grad_enabled = True
# op name -> multiplicative error applied to that op's backward output
_faults: dict[str, float] = {}

OP_NAMES = ("add", "sub", "mul", "scale", "lrelu", "abs", "sum", "mean", "concat",
            "matmul", "transpose", "softmax", "fully_connected", "reshape", "permute",
            "conv2d", "conv2d_depthwise", "conv2d_transposed")


def resolve_dtype(precision):
    if precision in DTYPES:
        return np.dtype(DTYPES[precision])
    return np.dtype(precision)


def set_debug(flag: bool) -> None:
    """Toggle non-finite checks after every forward op."""
    global _debug
    _debug = bool(flag)


def is_debug() -> bool:
    return _debug


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def inject_fault(op: str, factor: float = 1.05) -> None:
    """Corrupt the backward rule of ``op`` (verification harness only)."""
    if op not in OP_NAMES:
        raise ValueError(f"unknown op {op!r}; expected one of {', '.join(OP_NAMES)}")
    _faults[op] = factor


def clear_faults() -> None:
    _faults.clear()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        # ascontiguousarray would turn 0-d arrays into shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

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

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division only by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            factor = _faults.get(node.op)
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward, op):
    if _debug and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def scale(a, s):
    s = float(s)
    return _result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,), "scale")


def lrelu(x, slope=0.2):
    """Leaky ReLU: ``x`` where ``x >= 0`` else ``slope * x``."""
    neg = x.data < 0
    factor = np.where(neg, x.data.dtype.type(slope), x.data.dtype.type(1))
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "lrelu")


def abs_(x):
    # subgradient at 0 is 0
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def sum_all(x):
    shape = x.shape
    return _result(x.data.sum(dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x):
    shape, n = x.shape, x.size
    return _result(x.data.mean(dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def concat(tensors: Sequence[Tensor], axis=-1):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), backward, "concat")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes (leading batch axes must agree)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), backward, "matmul")


def transpose(a):
    """Swap the last two axes."""
    return _result(np.swapaxes(a.data, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def softmax_rows(m):
    """Softmax along the last axis, stabilised by the row maximum."""
    if _debug and not np.all(np.isfinite(m.data)):
        raise NonFiniteError("softmax_rows: non-finite input")
    y = m.data - m.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = g * y
        dot = gy.sum(axis=-1, keepdims=True)
        gy -= y * dot
        return (gy,)

    return _result(y, (m,), backward, "softmax")


def fully_connected(x, w, b=None):
    """Affine map along the last axis: ``x @ w + b``."""
    din, dout = w.shape
    if x.shape[-1] != din:
        raise DimensionError(f"fully_connected: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    wd = w.data
    y = x2 @ wd
    if b is not None:
        if b.shape != (dout,):
            raise DimensionError(f"fully_connected: bias {b.shape} does not match weight {w.shape}")
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, dout)
        grads = ((g2 @ wd.T).reshape(lead + (din,)), x2.T @ g2)
        if b is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _result(y.reshape(lead + (dout,)), parents, backward, "fully_connected")


# -- shape manipulation ------------------------------------------------------


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot map {x.shape} ({x.size} elements) to {shape}")
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),), "permute")


class ShapePlan(NamedTuple):
    """Reshape to ``shape`` then (optionally) reorder axes by ``axes``."""

    shape: tuple
    axes: Optional[tuple] = None


def reshape_permute(x, plan: ShapePlan):
    y = reshape(x, plan.shape)
    if plan.axes is not None:
        y = permute(y, plan.axes)
    return y


def split_heads(m, head_width):
    """(..., P, S) -> (..., P, S', N): head i owns columns [i*S', (i+1)*S')."""
    *lead, p, s = m.shape
    if s % head_width:
        raise ShapeError(f"split_heads: width {s} not divisible by head width {head_width}")
    n = s // head_width
    k = len(lead)
    y = reshape(m, (*lead, p, n, head_width))
    return permute(y, tuple(range(k)) + (k, k + 2, k + 1))


def merge_heads(t):
    """Inverse of :func:`split_heads`."""
    *lead, p, sp, n = t.shape
    k = len(lead)
    y = permute(t, tuple(range(k)) + (k, k + 2, k + 1))
    return reshape(y, (*lead, p, n * sp))


# -- convolutions ------------------------------------------------------------


def conv2d(x, w, b=None, mode="standard", stride=1, padding=None):
    """2-D convolution on NHWC input.

    ``mode`` selects the kernel layout:

    * ``"standard"``: ``w`` is (kh, kw, Cin, Cout); zero padding defaults to
      ``(kh - 1) // 2`` for stride 1 and 0 otherwise.
    * ``"depthwise"``: ``w`` is (kh, kw, Cin, m) producing Cin*m channels,
      output channel ``c*m + j`` filtering input channel ``c``.
    * ``"transposed"``: ``w`` is (s, s, Cin, Cout) with ``stride == s``; each
      input pixel scatters into an s x s output block.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != x.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} has {x.shape[3]} channels, kernel {w.shape}")
    if mode == "standard":
        return _conv_standard(x, w, b, stride, padding)
    if mode == "depthwise":
        return _conv_depthwise(x, w, b)
    if mode == "transposed":
        return _conv_transposed(x, w, b, stride)
    raise ValueError(f"unknown conv2d mode {mode!r}")


def _check_bias(b, cout):
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias {b.shape} does not match {cout} output channels")


def _conv_standard(x, w, b, stride, padding):
    bsz, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    _check_bias(b, cout)
    p = ((kh - 1) // 2 if stride == 1 else 0) if padding is None else padding
    span_h, span_w = h + 2 * p - kh, wd + 2 * p - kw
    if span_h < 0 or span_w < 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * p}x{wd + 2 * p}")
    if span_h % stride or span_w % stride:
        raise ShapeError(f"conv2d: extents {h}x{wd} incompatible with stride {stride} and kernel {kh}x{kw}")
    ho, wo = span_h // stride + 1, span_w // stride + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    y = cols @ wmat
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh, kw, cin)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, p:p + h, p:p + wd, :] if p else gxp
        grads = (gx, gw)
        if b is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _result(y.reshape(bsz, ho, wo, cout), parents, backward, "conv2d")


def _conv_depthwise(x, w, b):
    bsz, h, wd, cin = x.shape
    kh, kw, _, mult = w.shape
    _check_bias(b, cin * mult)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"depthwise conv needs odd kernel extents, got {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    wdat = w.data
    y = np.zeros((bsz, h, wd, cin, mult), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y += xp[:, i:i + h, j:j + wd, :, None] * wdat[i, j]
    y = y.reshape(bsz, h, wd, cin * mult)
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g5 = g.reshape(bsz, h, wd, cin, mult)
        gw = np.empty_like(wdat)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, i:i + h, j:j + wd, :]
                gw[i, j] = np.einsum("bhwc,bhwcm->cm", xs, g5)
                gxp[:, i:i + h, j:j + wd, :] += (g5 * wdat[i, j]).sum(axis=-1)
        grads = (gxp[:, ph:ph + h, pw:pw + wd, :], gw)
        if b is not None:
            grads += (g.reshape(-1, cin * mult).sum(axis=0),)
        return grads

    return _result(y, parents, backward, "conv2d_depthwise")


def _conv_transposed(x, w, b, stride):
    bsz, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if not (kh == kw == stride):
        raise ShapeError(f"transposed conv supports kernel == stride only, got {kh}x{kw} / {stride}")
    _check_bias(b, cout)
    s = stride
    x2 = x.data.reshape(-1, cin)
    wmat = w.data.transpose(2, 0, 1, 3).reshape(cin, s * s * cout)
    y = (x2 @ wmat).reshape(bsz, h, wd, s, s, cout).transpose(0, 1, 3, 2, 4, 5)
    y = y.reshape(bsz, h * s, wd * s, cout)
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g6 = g.reshape(bsz, h, s, wd, s, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, s * s * cout)
        gx = (g6 @ wmat.T).reshape(x.shape)
        gw = (x2.T @ g6).reshape(cin, s, s, cout).transpose(1, 2, 0, 3)
        grads = (gx, np.ascontiguousarray(gw))
        if b is not None:
            grads += (g.reshape(-1, cout).sum(axis=0),)
        return grads

    return _result(np.ascontiguousarray(y), parents, backward, "conv2d_transposed")


# -- verification ------------------------------------------------------------


def numeric_gradient(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every element of ``x``."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(base)).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(base.shape)


def analytic_gradient(f, x):
    xt = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                requires_grad=True)
    f(xt).backward()
    return np.zeros_like(xt.data) if xt.grad is None else xt.grad


def relative_error(a, n, floor=1e-8):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def finite_diff_check(f, x, h=1e-5, floor=1e-3):
    """Max elementwise relative error between backprop and central differences.

    ``f`` maps a Tensor to a scalar Tensor; evaluation is in float64.  Where
    both gradients are smaller than ``floor`` in magnitude the error is taken
    relative to ``floor``, i.e. near-zero gradients are checked absolutely;
    central differences carry roundoff of order eps * |f| / h that no
    relative test can resolve there.
    """
    a = analytic_gradient(f, x)
    n = numeric_gradient(f, x, h)
    return float(relative_error(a, n, floor).max()) if a.size else 0.0
