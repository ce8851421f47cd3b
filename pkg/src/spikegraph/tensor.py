"""Minimal dense-tensor kernel set with reverse-mode differentiation on a tape.

The operator vocabulary is deliberately closed: matmul, conv2d (plus a
depthwise variant), batch_norm, lstm_cell, elementwise arithmetic
(add/sub/mul/div/scale/exp/log/sqrt/relu), reductions (sum/mean/max),
shape ops (reshape/permute/concat/slice/repeat/take), and softmax.
Modules may register further ops through ``record_op`` (the spiking
threshold lives in ``neurons``).  Everything runs on numpy arrays,
float32 by default; the finite-difference oracle promotes to float64.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes of the operands do not compose."""


class InvalidInputError(ValueError):
    """Operand values violate an operation's precondition."""


class NumericalError(ArithmeticError):
    """Non-finite or otherwise unusable numeric state."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class _Record:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Ops executed while a tape is active (``with Tape() as tape:``) are
    appended in execution order; replaying the list in reverse visits each
    recorded operation exactly once and is a valid topological order.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def reset(self) -> None:
        self._records.clear()

    def _owns(self, t: "Tensor") -> bool:
        return any(out is t for rec in self._records for out in rec.outputs)


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(inputs: Sequence["Tensor"], outputs: Sequence["Tensor"],
              backward: Callable) -> None:
    """Register an executed op on the active tape.

    ``backward`` receives one upstream gradient array per output and must
    return one gradient array (or None) per input.  Extension point for
    ops defined outside this module.
    """
    requires = any(t.requires_grad for t in inputs)
    for out in outputs:
        out.requires_grad = requires
    tape = _active_tape()
    if tape is not None and requires:
        tape._records.append(_Record(tuple(inputs), tuple(outputs), backward))


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """N-d real array participating in the differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Internal constructor preserving dtype (op outputs)."""
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    # -- conveniences -------------------------------------------------------
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data + b.data)
    record_op((a, b), (out,), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(g, b.data.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data - b.data)
    record_op((a, b), (out,), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(-g, b.data.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data * b.data)

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    record_op((a, b), (out,), backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data / b.data)

    def backward(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    record_op((a, b), (out,), backward)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.data * a.data.dtype.type(c))
    record_op((a,), (out,), lambda g: (g * c,))
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    out = Tensor._wrap(out_data)
    record_op((a,), (out,), lambda g: (g * out_data,))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.log(a.data))
    record_op((a,), (out,), lambda g: (g / a.data,))
    return out


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    out = Tensor._wrap(out_data)

    def backward(g):
        # subgradient 0 at x = 0 keeps norm-style losses finite
        safe = np.where(out_data > 0, out_data, 1.0)
        return (np.where(out_data > 0, g / (2.0 * safe), 0.0).astype(a.data.dtype),)

    record_op((a,), (out,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor._wrap(np.where(mask, a.data, a.data.dtype.type(0)))
    record_op((a,), (out,), lambda g: (g * mask,))
    return out


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.shape} x {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as err:
        raise DimensionError(
            f"matmul batch extents do not broadcast: {a.shape} x {b.shape}") from err
    out = Tensor._wrap(out_data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    record_op((a, b), (out,), backward)
    return out


# ---------------------------------------------------------------------------
# conv2d / depthwise_conv2d
# ---------------------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding=0) -> Tensor:
    """Cross-correlation of x[B,Cin,H,W] with w[Cout,Cin,kh,kw]."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 operands, got {x.shape}, {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if Cin != Cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if kh > Hp or kw > Wp:
        raise DimensionError(
            f"conv2d kernel ({kh}x{kw}) larger than padded input ({Hp}x{Wp})")
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1

    # im2col once (channels-last); forward and both backward passes are GEMMs
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    xp_cl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    wd = w.data
    k_total = kh * kw
    cols = np.empty((B, Ho, Wo, k_total, Cin), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j, :] = \
                xp_cl[:, i:i + sh * Ho:sh, j:j + sw * Wo:sw, :]
    cols2d = cols.reshape(B * Ho * Wo, k_total * Cin)
    w2d = np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(Cout, k_total * Cin)
    out_data = np.ascontiguousarray(
        (cols2d @ w2d.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))
    if bias is not None:
        out_data += bias.data[None, :, None, None]
    out = Tensor._wrap(out_data)

    def backward(g):
        gt2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Cout)
        gw = (gt2d.T @ cols2d).reshape(Cout, kh, kw, Cin).transpose(0, 3, 1, 2)
        gcols = (gt2d @ w2d).reshape(B, Ho, Wo, k_total, Cin)
        gxp_cl = np.zeros((B, Hp, Wp, Cin), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp_cl[:, i:i + sh * Ho:sh, j:j + sw * Wo:sw, :] += \
                    gcols[:, :, :, i * kw + j, :]
        gxp = gxp_cl.transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else gxp
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    out2 = out
    record_op(inputs, (out2,), backward)
    return out2


def depthwise_conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """Per-channel cross-correlation: x[B,C,H,W] with w[C,kh,kw]."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = x.shape
    Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"depthwise channel mismatch: {x.shape} vs {w.shape}")
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if kh > Hp or kw > Wp:
        raise DimensionError(
            f"depthwise kernel ({kh}x{kw}) larger than padded input ({Hp}x{Wp})")
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    out_data = np.zeros((B, C, Ho, Wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw]
            out_data += xs * w.data[None, :, i, j, None, None]
    out = Tensor._wrap(out_data)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw]
                gw[:, i, j] = (g * xs).sum(axis=(0, 2, 3))
                gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += \
                    g * w.data[None, :, i, j, None, None]
        gx = gxp[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else gxp
        return gx, gw

    record_op((x, w), (out,), backward)
    return out


# ---------------------------------------------------------------------------
# batch_norm
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5,
               axis: int = 1) -> Tensor:
    """Normalize per channel (extent at ``axis``) over all other axes.

    Training mode uses batch statistics and updates the running buffers
    in place (momentum convention: new = (1-m)*old + m*batch); eval mode
    normalizes with the running buffers.
    """
    C = x.shape[axis]
    if gamma.size != C or beta.size != C:
        raise DimensionError(
            f"batch_norm gamma/beta length {gamma.size}/{beta.size} != channels {C}")
    red_axes = tuple(i for i in range(x.ndim) if i != axis)
    n = int(np.prod([x.shape[i] for i in red_axes])) if red_axes else 1
    bshape = tuple(C if i == axis else 1 for i in range(x.ndim))

    xd = x.data
    if training:
        if n == 0 or xd.size == 0:
            raise InvalidInputError("batch_norm training mode requires a non-empty batch")
        mu = xd.mean(axis=red_axes)
        var = xd.var(axis=red_axes)
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mu
        var_runtime = var * (n / (n - 1)) if n > 1 else var
        running_var[:] = (1.0 - momentum) * running_var + momentum * var_runtime
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape).astype(xd.dtype)) * inv_std.reshape(bshape)
    out_data = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    out = Tensor._wrap(out_data)

    def backward(g):
        gb = g.sum(axis=red_axes)
        gg = (g * xhat).sum(axis=red_axes)
        gamma_d = gamma.data
        if training:
            # sum(dxhat) = gamma*gb and sum(dxhat*xhat) = gamma*gg per channel,
            # so dx collapses to g*A + xhat*C + B with per-channel scalars
            a_coef = (gamma_d * inv_std).reshape(bshape)
            c_coef = (-gamma_d * gg * inv_std / n).reshape(bshape).astype(xd.dtype)
            b_coef = (-gamma_d * gb * inv_std / n).reshape(bshape).astype(xd.dtype)
            gx = g * a_coef
            gx += xhat * c_coef
            gx += b_coef
        else:
            gx = g * (gamma_d * inv_std).reshape(bshape)
        if gx.dtype != xd.dtype:
            gx = gx.astype(xd.dtype)
        return gx, gg.astype(gamma_d.dtype, copy=False), gb.astype(beta.data.dtype, copy=False)

    record_op((x, gamma, beta), (out,), backward)
    return out


# ---------------------------------------------------------------------------
# lstm_cell
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              w_ih: Tensor, w_hh: Tensor,
              b_ih: Tensor, b_hh: Tensor) -> tuple[Tensor, Tensor]:
    """Gated recurrence step; gate order (input, forget, cell, output).

    x[N,In], h_prev/c_prev[N,H], w_ih[4H,In], w_hh[4H,H], biases[4H].
    """
    N, In = x.shape
    H = h_prev.shape[-1]
    if w_ih.shape != (4 * H, In) or w_hh.shape != (4 * H, H):
        raise DimensionError(
            f"lstm_cell weight extents {w_ih.shape}/{w_hh.shape} do not match "
            f"input {In} / hidden {H}")
    if h_prev.shape != (N, H) or c_prev.shape != (N, H):
        raise DimensionError(
            f"lstm_cell state extents {h_prev.shape}/{c_prev.shape} != ({N},{H})")
    z = x.data @ w_ih.data.T + h_prev.data @ w_hh.data.T + b_ih.data + b_hh.data
    zi, zf, zg, zo = np.split(z, 4, axis=1)
    i = _sigmoid(zi)
    f = _sigmoid(zf)
    gcell = np.tanh(zg)
    o = _sigmoid(zo)
    c_data = f * c_prev.data + i * gcell
    tc = np.tanh(c_data)
    h_data = o * tc
    h = Tensor._wrap(h_data.astype(x.data.dtype))
    c = Tensor._wrap(c_data.astype(x.data.dtype))

    def backward(gh, gc):
        gc_total = gc + gh * o * (1.0 - tc * tc)
        go = gh * tc
        gf = gc_total * c_prev.data
        gi = gcell * gc_total
        gg = i * gc_total
        gc_prev = gc_total * f
        gz = np.concatenate([
            gi * i * (1.0 - i),
            gf * f * (1.0 - f),
            gg * (1.0 - gcell * gcell),
            go * o * (1.0 - o),
        ], axis=1)
        gx = gz @ w_ih.data
        gh_prev = gz @ w_hh.data
        gw_ih = gz.T @ x.data
        gw_hh = gz.T @ h_prev.data
        gb = gz.sum(axis=0)
        return gx, gh_prev, gc_prev, gw_ih, gw_hh, gb, gb.copy()

    record_op((x, h_prev, c_prev, w_ih, w_hh, b_ih, b_hh), (h, c), backward)
    return h, c


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor._wrap(x.data.sum(axis=axis, keepdims=keepdims))
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            for a in sorted(axes):
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype),)

    record_op((x,), (out,), backward)
    return out


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = Tensor._wrap(x.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            for a in sorted(axes):
                g = np.expand_dims(g, a)
        return ((np.broadcast_to(g, x.data.shape) / n).astype(x.data.dtype),)

    record_op((x,), (out,), backward)
    return out


def max_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; gradient is routed to the (first) argmax positions."""
    out_keep = x.data.max(axis=axis, keepdims=True)
    out_data = out_keep if keepdims else x.data.max(axis=axis, keepdims=False)
    mask = (x.data == out_keep)
    count = mask.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(out_data)
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            for a in sorted(axes):
                g = np.expand_dims(g, a)
        return ((mask * (g / count)).astype(x.data.dtype),)

    record_op((x,), (out,), backward)
    return out


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor._wrap(x.data.reshape(shape))
    record_op((x,), (out,), lambda g: (g.reshape(x.data.shape),))
    return out


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor._wrap(x.data.transpose(axes))
    record_op((x,), (out,), lambda g: (g.transpose(inv),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for k in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[k], offsets[k + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    record_op(tuple(tensors), (out,), backward)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def slice_(x: Tensor, key) -> Tensor:
    out = Tensor._wrap(x.data[key])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    record_op((x,), (out,), backward)
    return out


def repeat0(x: Tensor, count: int) -> Tensor:
    """Replicate x along a new leading axis (broadcast copy)."""
    out = Tensor._wrap(np.broadcast_to(x.data, (count,) + x.data.shape).copy())
    record_op((x,), (out,), lambda g: (g.sum(axis=0),))
    return out


def take0(x: Tensor, indices: np.ndarray) -> Tensor:
    """Permute/select slices along the leading axis."""
    indices = np.asarray(indices, dtype=np.int64)
    out = Tensor._wrap(x.data[indices])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, indices, g)
        return (gx,)

    record_op((x,), (out,), backward)
    return out


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(y.astype(x.data.dtype))

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((y * (g - dot)).astype(x.data.dtype),)

    record_op((x,), (out,), backward)
    return out


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep over the tape, populating ``grad`` on leaves.

    The loss must be scalar and produced by an op recorded on this tape.
    The tape is reset afterwards.
    """
    if loss.size != 1:
        raise InvalidInputError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not tape._owns(loss):
        raise InvalidInputError("loss is not reachable from this tape's outputs")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape._records):
        gouts = [out.grad for out in rec.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros_like(out.data) if g is None else g
                 for g, out in zip(gouts, rec.outputs)]
        gins = rec.backward(*gouts)
        if not isinstance(gins, tuple):
            gins = (gins,)
        for t, g in zip(rec.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if g.dtype != t.data.dtype:
                g = g.astype(t.data.dtype)
            # grads are never mutated in place, so holding a view is safe
            t.grad = g if t.grad is None else t.grad + g
    tape.reset()


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------

class GradCheckReport:
    def __init__(self, max_rel_error: float, passed: bool, failures: int,
                 checked: int, note: str = ""):
        self.max_rel_error = max_rel_error
        self.passed = passed
        self.failures = failures
        self.checked = checked
        self.note = note

    def __repr__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"GradCheckReport({status}, max_rel={self.max_rel_error:.3e}, "
                f"failures={self.failures}/{self.checked}{', ' + self.note if self.note else ''})")


def grad_check(f: Callable[..., Tensor], leaves: Sequence[Tensor],
               h: float = 1e-4, tol: float = 1e-3,
               min_pass_fraction: float = 1.0) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*leaves)`` with central differences.

    The check runs in float64 regardless of the leaves' dtype so the
    difference quotient is trustworthy at h=1e-4.
    """
    if h <= 0:
        raise InvalidInputError("grad_check requires h > 0")
    work = [Tensor(t.data.astype(np.float64), requires_grad=True, dtype=np.float64)
            for t in leaves]
    with Tape() as tape:
        out = f(*work)
        if out.size != 1:
            raise InvalidInputError("grad_check target must be scalar")
        backward(out, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in work]
    if any(not np.isfinite(a).all() for a in analytic):
        return GradCheckReport(np.inf, False, -1, -1, note="non-finite analytic gradient")

    max_rel = 0.0
    failures = 0
    checked = 0
    for t, a in zip(work, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f(*work).item()
            flat[idx] = orig - h
            fm = f(*work).item()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(aflat[idx]), abs(numeric))
            err = abs(aflat[idx] - numeric)
            rel = err / denom if denom > 1e-8 else err
            max_rel = max(max_rel, rel)
            if rel > tol:
                failures += 1
            checked += 1
    passed = checked > 0 and (checked - failures) >= min_pass_fraction * checked
    return GradCheckReport(max_rel, passed, failures, checked)


# ---------------------------------------------------------------------------
# Tensor blob serialization ("SGT1" format)
# ---------------------------------------------------------------------------

_MAGIC = b"SGT1"


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = _MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(blob: bytes) -> Tensor:
    if blob[:4] != _MAGIC:
        raise InvalidInputError("bad tensor blob: missing SGT1 magic")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    if data.size != count:
        raise InvalidInputError("bad tensor blob: truncated payload")
    return Tensor(data.reshape(shape).copy())


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
