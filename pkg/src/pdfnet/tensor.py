"""Rank-4 tensors with reverse-mode automatic differentiation.

Every feature map in the network lives in a :class:`Tensor` laid out as
(batch, channels, height, width).  Operations build a graph of nodes; calling
:meth:`Tensor.backward` on a scalar walks it once in reverse topological order
and accumulates gradients on every leaf that asked for them.

The numeric work is plain numpy.  Convolutions are computed tap by tap (one
batched matmul per kernel position), which keeps memory flat and covers
regular, grouped and depthwise kernels with a single code path.
"""
from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float32

_debug_nans = False
_relu_masks = None  # [mode, masks, cursor] while freeze_relu_masks() is active


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ConfigurationError(ValueError):
    """Raised when an operation or layer is configured inconsistently."""


@contextlib.contextmanager
def debug_nans(enabled=True):
    """Check every op output for NaN/Inf while the context is active."""
    global _debug_nans
    previous, _debug_nans = _debug_nans, enabled
    try:
        yield
    finally:
        _debug_nans = previous


@contextlib.contextmanager
def freeze_relu_masks():
    """Pin every ReLU to the on/off pattern of the first forward pass in the context.

    The first pass records masks in call order; later passes replay them, so
    the network becomes the smooth function of its current linear piece.
    Central differences of that function are free of kink-crossing error.
    Call :func:`replay_relu_masks` before each replayed forward pass.
    """
    global _relu_masks
    previous, _relu_masks = _relu_masks, ["record", [], 0]
    try:
        yield
    finally:
        _relu_masks = previous


def replay_relu_masks():
    if _relu_masks is None:
        raise RuntimeError("replay_relu_masks() outside freeze_relu_masks()")
    _relu_masks[0] = "replay"
    _relu_masks[2] = 0


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    ``backward``; interior nodes drop their gradient once it has been
    propagated to their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None, name=""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data, parents, backward, op):
        """Create an interior node; ``backward(g)`` returns one grad per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        out.op = op
        parents = tuple(parents)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if _debug_nans and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def backward(self, grad=None):
        """Propagate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
    # iterative DFS post-order, reversed: consumers before producers
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
    order.reverse()
    return order


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_rank4(x, what):
    if x.data.ndim != 4:
        raise DimensionError(f"{what} expects a rank-4 (N, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------- convolution

def conv_output_size(size, kernel, stride, dilation, padding):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _tap_slices(i, j, dilation, stride, ho, wo):
    return (
        slice(i * dilation, i * dilation + stride * (ho - 1) + 1, stride),
        slice(j * dilation, j * dilation + stride * (wo - 1) + 1, stride),
    )


def conv2d(x, w, b=None, stride=1, dilation=1, padding=0, groups=1):
    """2-d cross-correlation with stride, dilation, zero padding and groups.

    ``w`` has shape (out, in // groups, kh, kw).  Depthwise convolution is
    ``groups == in_channels``.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_rank4(x, "conv2d input")
    if w.data.ndim != 4:
        raise DimensionError(f"conv2d weight must be rank 4, got shape {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if groups < 1 or c % groups or o % groups:
        raise ConfigurationError(
            f"groups={groups} must divide in_channels={c} and out_channels={o}"
        )
    if cg != c // groups:
        raise DimensionError(
            f"channel axis mismatch: weight expects {cg * groups} input channels, input has {c}"
        )
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigurationError("stride and dilation must be >= 1, padding >= 0")
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(wd, kw, stride, dilation, padding)
    if ho < 1:
        raise DimensionError(f"height axis too small: {h} gives output height {ho}")
    if wo < 1:
        raise DimensionError(f"width axis too small: {wd} gives output width {wo}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise DimensionError(f"bias must have shape ({o},), got {b.shape}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    og = o // groups
    depthwise = cg == 1 and og == 1
    wdata = w.data
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x.data, wdata))
    for i in range(kh):
        for j in range(kw):
            si, sj = _tap_slices(i, j, dilation, stride, ho, wo)
            patch = xp[:, :, si, sj]
            if depthwise:
                out += patch * wdata[:, 0, i, j][None, :, None, None]
            else:
                wt = wdata[:, :, i, j].reshape(groups, og, cg)
                pm = patch.reshape(n, groups, cg, ho * wo)
                out += np.matmul(wt[None], pm).reshape(n, o, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if w.requires_grad:
            gw = np.zeros_like(wdata)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
        gm = None if depthwise else g.reshape(n, groups, og, ho * wo)
        for i in range(kh):
            for j in range(kw):
                si, sj = _tap_slices(i, j, dilation, stride, ho, wo)
                if depthwise:
                    if gw is not None:
                        gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, si, sj])
                    if x.requires_grad:
                        gxp[:, :, si, sj] += g * wdata[:, 0, i, j][None, :, None, None]
                    continue
                if gw is not None:
                    pm = xp[:, :, si, sj].reshape(n, groups, cg, ho * wo)
                    gw[:, :, i, j] = (
                        np.matmul(gm, pm.transpose(0, 1, 3, 2)).sum(axis=0).reshape(o, cg)
                    )
                if x.requires_grad:
                    wt = wdata[:, :, i, j].reshape(groups, og, cg)
                    gp = np.matmul(wt.transpose(0, 2, 1)[None], gm)
                    gxp[:, :, si, sj] += gp.reshape(n, c, ho, wo)
        if x.requires_grad:
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out, parents, backward, "conv2d")


# -------------------------------------------------------------------- pooling

def avg_pool2d(x, kernel=2, stride=2):
    """Mean over non-overlapping (by default) ``kernel`` x ``kernel`` windows; floors odd sizes."""
    x = as_tensor(x)
    _check_rank4(x, "avg_pool2d")
    n, c, h, w = x.shape
    if kernel > h:
        raise DimensionError(f"height axis {h} smaller than pooling kernel {kernel}")
    if kernel > w:
        raise DimensionError(f"width axis {w} smaller than pooling kernel {kernel}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    scale = 1.0 / (kernel * kernel)
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            si, sj = _tap_slices(i, j, 1, stride, ho, wo)
            out += x.data[:, :, si, sj]
    out *= scale

    def backward(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                si, sj = _tap_slices(i, j, 1, stride, ho, wo)
                gx[:, :, si, sj] += gs
        return (gx,)

    return Tensor.from_op(out, (x,), backward, "avg_pool2d")


# -------------------------------------------------------------------- resize

def interpolation_matrix(in_size, out_size, dtype=np.float64):
    """Row-stochastic (out_size, in_size) linear interpolation matrix.

    Half-pixel centres: ``src = (dst + 0.5) * in / out - 0.5`` clamped to the
    valid range, so equal sizes give the identity.
    """
    dst = np.arange(out_size, dtype=np.float64)
    src = (dst + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x, out_h, out_w):
    """Separable bilinear resize to (out_h, out_w) with half-pixel alignment."""
    x = as_tensor(x)
    _check_rank4(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output size must be positive, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ry = interpolation_matrix(h, out_h, x.dtype)
    rx = interpolation_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return Tensor.from_op(out, (x,), backward, "bilinear_resize")


# ------------------------------------------------------------ channel algebra

def concat_channels(xs):
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat_channels needs at least one input")
    for x in xs:
        _check_rank4(x, "concat_channels")
    n, _, h, w = xs[0].shape
    for k, x in enumerate(xs[1:], 1):
        xn, _, xh, xw = x.shape
        for axis, a, bb in (("batch", n, xn), ("height", h, xh), ("width", w, xw)):
            if a != bb:
                raise DimensionError(f"concat_channels: {axis} axis mismatch at input {k} ({bb} != {a})")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([x.data for x in xs], axis=1)
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(xs)))

    return Tensor.from_op(out, xs, backward, "concat")


def slice_channels(x, start, stop):
    x = as_tensor(x)
    c = x.shape[1]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return Tensor.from_op(x.data[:, start:stop].copy(), (x,), backward, "slice")


# --------------------------------------------------------------- elementwise

def add(x, y):
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise DimensionError(f"add: shape mismatch {x.shape} vs {y.shape}")
    return Tensor.from_op(x.data + y.data, (x, y), lambda g: (g, g), "add")


def relu(x):
    """max(x, 0); NaN inputs stay NaN so a blow-up is never silently zeroed."""
    x = as_tensor(x)
    mask = (x.data > 0) | np.isnan(x.data)
    if _relu_masks is not None:
        mode, masks, cursor = _relu_masks
        if mode == "record":
            masks.append(mask)
        else:
            mask = masks[cursor]
            _relu_masks[2] = cursor + 1
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def mul(x, y):
    x, y = as_tensor(x), as_tensor(y)
    out = x.data * y.data

    def backward(g):
        return (_unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape))

    return Tensor.from_op(out, (x, y), backward, "mul")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def sum_all(x):
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


# ----------------------------------------------------------------- batchnorm

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(x, gamma, beta, running_mean, running_var, train, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalisation.

    Train mode normalises with the biased batch variance over (N, H, W) and
    updates ``running_mean``/``running_var`` in place (running variance uses
    the unbiased estimate).  Eval mode uses the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_rank4(x, "batchnorm2d")
    c = x.shape[1]
    for label, v in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(v) != (c,):
            raise DimensionError(f"batchnorm {label} length {np.shape(v)} does not match channel axis {c}")
    g4 = gamma.data[None, :, None, None]
    if train:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        centred = x.data - mean[None, :, None, None]
        var = (centred * centred).mean(axis=(0, 2, 3))
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = centred * inv_std[None, :, None, None]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean[None, :, None, None].astype(x.dtype)) * inv_std[None, :, None, None]
    out = g4 * xhat + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g4
            if train:
                mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (dxhat - mean_d - xhat * mean_dx) * inv_std[None, :, None, None]
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


# ------------------------------------------------------------- grad checking

def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` with respect to array ``x``.

    ``x`` is perturbed in place one entry at a time and restored afterwards.
    """
    arr = x.data if isinstance(x, Tensor) else x
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(_scalar(f(x)))
        flat[k] = orig - h
        fm = float(_scalar(f(x)))
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def _scalar(v):
    return v.item() if isinstance(v, Tensor) else v
