"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a float32/float64 ndarray. Operations on tensors record a
computation graph while gradients are enabled and at least one operand needs a
gradient; ``backward`` walks the recording in reverse topological order and
accumulates ``grad`` arrays. Everything is single-threaded and deterministic:
the same inputs always produce bit-identical forward values and gradients.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np


class AutodiffError(RuntimeError):
    """Raised for misuse of the tape (backward outside a recording etc.)."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True
_tape_ids = itertools.count(1)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only execution)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense float array plus an optional slot in the current recording.

    ``requires_grad`` is True for trainable leaves and for any value computed
    from one; only those receive a ``grad`` during ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape_id = next(_tape_ids) if self.requires_grad else None
        self._parents = None
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; scalars take the cheap *_const path
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, neg(other))
        return add_const(self, -other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _result(data, parents, backward):
    """Wrap an op result, recording it only when a parent needs gradients."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward
        return out
    return Tensor(data)


def _accum(t: Tensor, g):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True) if g.dtype != t.data.dtype else g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


def backward(loss: Tensor):
    """Populate gradients of everything the scalar ``loss`` was computed from.

    Rejects non-scalar tensors and tensors that were never recorded (created
    outside a gradient-tracked computation).
    """
    if not isinstance(loss, Tensor):
        raise AutodiffError("backward expects a Tensor")
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise AutodiffError("tensor is outside a recording; nothing to differentiate")

    # iterative post-order topo sort (graphs are deep enough to overflow recursion)
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._parents is not None:
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _result(out_data, (a, b), bwd)


def add_const(a: Tensor, c) -> Tensor:
    def bwd(g):
        _accum(a, g)

    return _result(a.data + c, (a,), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _result(-a.data, (a,), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(out_data, (a, b), bwd)


def mul_const(a: Tensor, c) -> Tensor:
    def bwd(g):
        _accum(a, g * c)

    return _result(a.data * c, (a,), bwd)


def pow_const(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a real exponent (a must stay positive for p<1)."""
    out_data = a.data ** p

    def bwd(g):
        _accum(a, g * (p * a.data ** (p - 1.0)))

    return _result(out_data, (a,), bwd)


def _stable_sigmoid(x):
    # exp of a nonpositive argument only, then mirror for x < 0
    e = np.exp(-np.abs(x))
    s = 1.0 / (1.0 + e)
    return np.where(x >= 0, s, 1.0 - s)


def sigmoid(a: Tensor) -> Tensor:
    out_data = _stable_sigmoid(a.data).astype(a.data.dtype)

    def bwd(g):
        _accum(a, g * (out_data * (1.0 - out_data)))

    return _result(out_data, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the smooth sigmoid-weighted linear unit."""
    x = a.data
    s = _stable_sigmoid(x).astype(x.dtype)
    out_data = x * s

    def bwd(g):
        _accum(a, g * (s * (1.0 + x * (1.0 - s))))

    return _result(out_data, (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype))

    return _result(out_data, (a,), bwd)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max reduction over one axis; gradient flows to the (first) argmax."""
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    idx = a.data.argmax(axis=axis)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), gg, axis=axis)
        _accum(a, grad)

    return _result(out_data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accum(a, (np.broadcast_to(gg, a.data.shape) / count).astype(a.data.dtype))

    return _result(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _result(out_data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _result(out_data, (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                _accum(t, np.ascontiguousarray(part))

    return _result(out_data, tuple(tensors), bwd)


def upsample_nearest2(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an [N,C,H,W] tensor."""
    out_data = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        n, c, h2, w2 = g.shape
        _accum(a, g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _result(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _result(out_data, (a, b), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add into the table."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}")
    out_data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _result(out_data, (table,), bwd)


# ---------------------------------------------------------------------------
# convolution (im2col + GEMM; backward recomputes the column matrix)


def _im2col(x, kh, kw, stride, pad):
    """Pack windows as a (C*kh*kw, N*OH*OW) matrix.

    This layout's copy walks the image rows contiguously, several times faster
    than the (rows, taps) orientation.
    """
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, c, oh, ow, kh, kw), (sn, sc, sh * stride, sw * stride, sh, sw))
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw,
                                                                         n * oh * ow)
    return cols, oh, ow


def _col2im(gcols, xshape, kh, kw, stride, pad, oh, ow):
    """Scatter a (C*kh*kw, N*OH*OW) gradient back onto the padded input."""
    n, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    gx = np.zeros((c, n, hp, wp), dtype=gcols.dtype)
    gwin = gcols.reshape(c, kh, kw, n, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += gwin[:, i, j]
    if pad:
        gx = gx[:, :, pad:pad + h, pad:pad + w]
    return gx.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of [N,C,H,W] input with an [K,C,kh,kw] kernel.

    Output extents are floor((H + 2*pad - kh)/stride) + 1. Kernel extents must
    be odd and padding nonnegative.
    """
    _check_same_dtype(x, w, "conv2d")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.data.shape} and {w.data.shape}")
    n, c, h, wdt = x.data.shape
    k, ck, kh, kw = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if pad < 0:
        raise ShapeError(f"conv2d pad must be >= 0, got {pad}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if c != ck:
        raise ShapeError(
            f"conv2d channel mismatch: input {tuple(x.data.shape)} has {c} channels, "
            f"kernel {tuple(w.data.shape)} expects {ck}")
    if h + 2 * pad < kh or wdt + 2 * pad < kw:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * pad}x{wdt + 2 * pad} (input {tuple(x.data.shape)})")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)  # (C*kh*kw, N*OH*OW)
    wmat = w.data.reshape(k, -1)
    out = wmat @ cols  # (K, N*OH*OW); columns iterate (N, OH, OW)
    if b is not None:
        out += b.data[:, None]
    out_data = np.ascontiguousarray(
        out.reshape(k, n, oh, ow).transpose(1, 0, 2, 3))

    # keep the column matrix for the backward pass only while it can be used
    saved_cols = cols if (_grad_enabled and (w.requires_grad or x.requires_grad)) else None

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(k, n * oh * ow)
        if w.requires_grad:
            _accum(w, (gmat @ saved_cols.T).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, gmat.sum(axis=1))
        if x.requires_grad:
            gcols = wmat.T @ gmat
            _accum(x, _col2im(gcols, x.data.shape, kh, kw, stride, pad, oh, ow))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out_data, parents, bwd)


def group_norm(x: Tensor, scale: Tensor, shift: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """Per-group feature normalization of [N,C,H,W] with per-channel affine.

    Fused forward/backward (the composed-primitive version costs several times
    more in graph overhead on small images).
    """
    n, c, h, w = x.data.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(
            f"group_norm affine shapes {scale.data.shape}/{shift.data.shape} != ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out_data = xhat * scale.data.reshape(1, c, 1, 1) + shift.data.reshape(1, c, 1, 1)

    def bwd(g):
        if scale.requires_grad:
            _accum(scale, (g * xhat).sum(axis=(0, 2, 3)))
        if shift.requires_grad:
            _accum(shift, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * scale.data.reshape(1, c, 1, 1)).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = (dxhat * xh).mean(axis=2, keepdims=True)
            gx = (dxhat - m1 - xh * m2) * inv
            _accum(x, gx.reshape(n, c, h, w).astype(x.data.dtype))

    return _result(out_data.astype(x.data.dtype), (x, scale, shift), bwd)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between row-wise softmax(logits) and integer labels."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,K] logits, got {logits.data.shape}")
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} logit rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    out_data = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    def bwd(g):
        p = ez / sez
        p[np.arange(n), labels] -= 1.0
        _accum(logits, (g * p / n).astype(logits.data.dtype))

    return _result(out_data, (logits,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    d = a - b
    return tmean(mul(d, d))
