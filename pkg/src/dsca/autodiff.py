"""Reverse-mode automatic differentiation over dense numpy tensors.

A ``Tensor`` wraps a numpy array. While a ``Tape`` is active (as a context
manager), every operation whose inputs require gradients appends a node to
the tape; ``Tape.backward`` replays the nodes in reverse and accumulates
``grad`` arrays on the participating tensors. Without an active tape the
same operations run forward-only, which is how inference works.

Float32 is the intended training precision; float64 flows through
unchanged and is used for finite-difference gradient checking.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeMismatch(ValueError):
    pass


class DomainError(ValueError):
    pass


class NotScalarLoss(ValueError):
    pass


_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


def _as_float(data):
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional value; row-major data plus an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = _as_float(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None

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

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"tensor of shape {self.shape} is not a scalar")

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all real work happens in the module-level functions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tslice(self, idx)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def softmax(self, axis=-1):
        return softmax(self, axis=axis)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction and the backward sweep visits each node once.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active in this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _LOCAL.tape = None
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        """Populate ``grad`` on every requires-grad tensor reachable from loss.

        Gradients accumulate additively into any pre-existing ``grad``,
        which is what gradient accumulation over a batch relies on.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise NotScalarLoss("backward requires a scalar loss tensor")
        if not loss.requires_grad:
            raise ValueError("loss is not on the tape (nothing requires grad)")
        grads = {id(loss): np.ones_like(loss.data)}
        holder = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            in_grads = node.backward_fn(g, needs)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holder[key] = t
        for key, t in holder.items():
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g


def _record(op, inputs, out_data, backward_fn):
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.nodes.append(TapeNode(op, tuple(inputs), out, backward_fn))
    return out


def _sum_to_vector(g, vec_shape):
    # reduce a full-shape gradient onto a trailing-axis vector operand
    return g.reshape(-1, vec_shape[0]).sum(axis=0)


def _check_addable(a, b, op):
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        return "vec"
    raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def add(a, b):
    kind = _check_addable(a, b, "add")

    def bw(g, needs):
        ga = g if needs[0] else None
        if not needs[1]:
            gb = None
        else:
            gb = g if kind == "same" else _sum_to_vector(g, b.shape)
        return ga, gb

    return _record("add", (a, b), a.data + b.data, bw)


def sub(a, b):
    kind = _check_addable(a, b, "sub")

    def bw(g, needs):
        ga = g if needs[0] else None
        if not needs[1]:
            gb = None
        else:
            gb = -g if kind == "same" else -_sum_to_vector(g, b.shape)
        return ga, gb

    return _record("sub", (a, b), a.data - b.data, bw)


def mul(a, b):
    kind = _check_addable(a, b, "mul")

    def bw(g, needs):
        ga = g * b.data if needs[0] else None
        if not needs[1]:
            gb = None
        else:
            gb = g * a.data if kind == "same" else _sum_to_vector(g * a.data, b.shape)
        return ga, gb

    return _record("mul", (a, b), a.data * b.data, bw)


def scale(a, c):
    c = float(c)

    def bw(g, needs):
        return (g * c if needs[0] else None,)

    return _record("scale", (a,), a.data * c, bw)


def matmul(a, b):
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeMismatch("matmul requires tensors with ndim >= 2")
    if A.ndim != B.ndim or A.shape[:-2] != B.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch dims {A.shape[:-2]} vs {B.shape[:-2]}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims {A.shape} @ {B.shape}")

    def bw(g, needs):
        ga = g @ np.swapaxes(B, -1, -2) if needs[0] else None
        gb = np.swapaxes(A, -1, -2) @ g if needs[1] else None
        return ga, gb

    return _record("matmul", (a, b), A @ B, bw)


def affine(x, w, b=None):
    """x @ w + b with x of shape (..., d_in), w (d_in, d_out), b (d_out,)."""
    X, W = x.data, w.data
    if W.ndim != 2 or X.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"affine: {X.shape} @ {W.shape}")
    out = X @ W
    if b is not None:
        if b.data.shape != (W.shape[1],):
            raise ShapeMismatch(f"affine bias: {b.data.shape} vs ({W.shape[1]},)")
        out = out + b.data
        inputs = (x, w, b)
    else:
        inputs = (x, w)

    def bw(g, needs):
        gx = g @ W.T if needs[0] else None
        gw = None
        if needs[1]:
            gw = X.reshape(-1, X.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return _record("affine", inputs, out, bw)


def conv1d_seq(x, w, b=None, stride=1, pad=0):
    """1-D convolution along the token axis.

    x: (m, d_in) token sequence; w: (d_out, d_in, k); b: (d_out,).
    Output length is (m + 2*pad - k) // stride + 1.
    """
    X, W = x.data, w.data
    if X.ndim != 2 or W.ndim != 3 or X.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"conv1d_seq: x {X.shape}, w {W.shape}")
    m, d_in = X.shape
    d_out, _, k = W.shape
    if m + 2 * pad < k:
        raise ShapeMismatch(f"conv1d_seq: sequence of {m} too short for kernel {k} with pad {pad}")
    L = (m + 2 * pad - k) // stride + 1
    xp = np.zeros((m + 2 * pad, d_in), dtype=X.dtype)
    xp[pad:pad + m] = X
    out = np.zeros((L, d_out), dtype=X.dtype)
    for j in range(k):
        rows = xp[j:j + (L - 1) * stride + 1:stride]
        out += rows @ W[:, :, j].T
    if b is not None:
        if b.data.shape != (d_out,):
            raise ShapeMismatch(f"conv1d_seq bias: {b.data.shape}")
        out = out + b.data
        inputs = (x, w, b)
    else:
        inputs = (x, w)

    def bw(g, needs):
        gx = gw = gb = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j:j + (L - 1) * stride + 1:stride] += g @ W[:, :, j]
            gx = gxp[pad:pad + m]
        if needs[1]:
            gw = np.zeros_like(W)
            for j in range(k):
                rows = xp[j:j + (L - 1) * stride + 1:stride]
                gw[:, :, j] = g.T @ rows
        if b is None:
            return gx, gw
        if needs[2]:
            gb = g.sum(axis=0)
        return gx, gw, gb

    return _record("conv1d_seq", inputs, out, bw)


def conv2d_square(x, w, b=None, pad=1):
    """2-D convolution (stride 1) applied independently to each square.

    x: (m, h, h, d_in); w: (d_out, d_in, kh, kw); b: (d_out,).
    """
    X, W = x.data, w.data
    if X.ndim != 4 or W.ndim != 4 or X.shape[3] != W.shape[1]:
        raise ShapeMismatch(f"conv2d_square: x {X.shape}, w {W.shape}")
    m, H, Wd, d_in = X.shape
    d_out, _, kh, kw = W.shape
    Ho = H + 2 * pad - kh + 1
    Wo = Wd + 2 * pad - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeMismatch("conv2d_square: kernel larger than padded square")
    xp = np.zeros((m, H + 2 * pad, Wd + 2 * pad, d_in), dtype=X.dtype)
    xp[:, pad:pad + H, pad:pad + Wd, :] = X
    out = np.zeros((m, Ho, Wo, d_out), dtype=X.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + Ho, j:j + Wo, :] @ W[:, :, i, j].T
    if b is not None:
        if b.data.shape != (d_out,):
            raise ShapeMismatch(f"conv2d_square bias: {b.data.shape}")
        out = out + b.data
        inputs = (x, w, b)
    else:
        inputs = (x, w)

    def bw(g, needs):
        gx = gw = gb = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + Ho, j:j + Wo, :] += g @ W[:, :, i, j]
            gx = gxp[:, pad:pad + H, pad:pad + Wd, :]
        if needs[1]:
            gw = np.zeros_like(W)
            for i in range(kh):
                for j in range(kw):
                    win = xp[:, i:i + Ho, j:j + Wo, :]
                    gw[:, :, i, j] = np.einsum("mpqo,mpqi->oi", g, win)
        if b is None:
            return gx, gw
        if needs[2]:
            gb = g.sum(axis=(0, 1, 2))
        return gx, gw, gb

    return _record("conv2d_square", inputs, out, bw)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", (x,), y, bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    X = x.data
    n = X.shape[-1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeMismatch(f"layer_norm affine params must have shape ({n},)")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data

    def bw(g, needs):
        gx = ggamma = gbeta = None
        if needs[0]:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        if needs[2]:
            gbeta = g.reshape(-1, n).sum(axis=0)
        return gx, ggamma, gbeta

    return _record("layer_norm", (x, gamma, beta), y, bw)


def relu(x):
    mask = x.data > 0

    def bw(g, needs):
        return (g * mask if needs[0] else None,)

    return _record("relu", (x,), np.where(mask, x.data, 0.0), bw)


def tanh(x):
    y = np.tanh(x.data)

    def bw(g, needs):
        return (g * (1.0 - y * y) if needs[0] else None,)

    return _record("tanh", (x,), y, bw)


def sigmoid(x):
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    y = y.astype(x.data.dtype, copy=False)

    def bw(g, needs):
        return (g * y * (1.0 - y) if needs[0] else None,)

    return _record("sigmoid", (x,), y, bw)


def log(x):
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    y = np.log(x.data)

    def bw(g, needs):
        return (g / x.data if needs[0] else None,)

    return _record("log", (x,), y, bw)


def clip(x, lo, hi):
    """Clamp values to [lo, hi]; gradient passes through the interior."""
    mask = (x.data >= lo) & (x.data <= hi)

    def bw(g, needs):
        return (g * mask if needs[0] else None,)

    return _record("clip", (x,), np.clip(x.data, lo, hi), bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g, needs):
        grads = []
        start = 0
        for t, sz, need in zip(tensors, sizes, needs):
            idx = [slice(None)] * t.data.ndim
            idx[axis] = slice(start, start + sz)
            grads.append(g[tuple(idx)] if need else None)
            start += sz
        return tuple(grads)

    return _record("concat", tensors, out, bw)


def tsum(x, axis=None):
    out = x.data.sum(axis=axis)

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _record("sum", (x,), out, bw)


def tmean(x, axis=None):
    n = x.data.size if axis is None else x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g / n, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape).copy(),)

    return _record("mean", (x,), out, bw)


def reshape(x, shape):
    out = x.data.reshape(shape)

    def bw(g, needs):
        return (g.reshape(x.data.shape) if needs[0] else None,)

    return _record("reshape", (x,), out, bw)


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        return (np.transpose(g, inv),)

    return _record("transpose", (x,), out, bw)


def tslice(x, idx):
    out = x.data[idx]

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record("slice", (x,), out, bw)


def grad_check(f, x, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    ``f`` maps the tensor ``x`` to a scalar Tensor; it may close over other
    tensors, whose gradients are ignored here. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    x.grad = None
    with Tape() as tape:
        out = f(x)
    tape.backward(out)
    analytic = np.array(x.grad, dtype=np.float64, copy=True)
    x.grad = None

    numeric = np.zeros(x.data.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
