"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap float64 numpy arrays. Operations executed inside a ``Tape``
context record backward rules onto that tape; ``backward`` replays the
tape in reverse order and accumulates gradients additively on every
tensor that has ``requires_grad`` set.

The operation set is exactly what the miniature stereo networks and the
gradient-based attacks need: convolution, the two cost-volume builders,
soft-argmin disparity regression, leaky ReLU, a masked Huber loss, and
bilinear resizing (forward only).
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "conv2d",
    "correlate_disparity",
    "stack_shift",
    "soft_argmin",
    "leaky_relu",
    "bilinear_resize",
    "huber_loss",
    "tensor_sum",
]

_local = threading.local()


def _current_tape():
    return getattr(_local, "tape", None)


class Tensor:
    """Dense float64 tensor with an optional gradient buffer."""

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return "Tensor(shape={}, requires_grad={})".format(
            tuple(self.shape), self.requires_grad
        )

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tensor_sum(self)


class _Node:
    """One recorded operation: output, inputs, and its backward rule."""

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass.

    One tape per sample; tapes share no mutable state, so disjoint tapes
    may run concurrently (one per thread).
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        self._prev = _current_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False


def _record(out, inputs, backward_fn):
    tape = _current_tape()
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    if tape is not None and needs:
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Repeated calls without clearing gradients accumulate.
    """
    if loss.size != 1:
        raise ValueError(
            "backward requires a scalar loss, got shape {}".format(tuple(loss.shape))
        )
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not produced by taped operations")
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node.output.grad is None:
            continue
        node.backward_fn(node.output.grad)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _record(out, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _record(out, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def _unbroadcast(g, shape):
    """Sum g down to ``shape`` (scalars and broadcast operands)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def tensor_sum(a):
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.sum()))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, np.asarray(g).item()))

    return _record(out, (a,), bwd)


def leaky_relu(x, slope=0.1):
    """Elementwise max(x, slope*x); the subgradient at 0 is ``slope``."""
    x = _as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, slope * x.data))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(mask, g, slope * g))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, kh, kw, stride, out_h, out_w):
    # xp: padded input [N, C, Hp, Wp] -> columns [N, out_h*out_w, C*kh*kw]
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]
    n, c = xp.shape[0], xp.shape[1]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n, out_h * out_w, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d(x, kernel, bias, stride=1, padding=0):
    """2D cross-correlation (deep-learning convention; no kernel flip).

    x: [N, C, H, W], kernel: [K, C, kh, kw], bias: [K].
    Output spatial size: (H + 2*padding - kh) // stride + 1.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4:
        raise ValueError("conv2d input must be 4-D [N,C,H,W], got {}".format(x.data.ndim))
    if kernel.data.ndim != 4:
        raise ValueError("conv2d kernel must be 4-D [K,C,kh,kw]")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(
            "conv2d channel mismatch: input has C={} but kernel expects C={}".format(c, ck)
        )
    if bias.shape != (k,):
        raise ValueError(
            "conv2d bias must have shape ({},), got {}".format(k, tuple(bias.shape))
        )
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            "conv2d kernel {}x{} exceeds padded input {}x{}".format(
                kh, kw, h + 2 * padding, w + 2 * padding
            )
        )
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    wmat = kernel.data.reshape(k, c * kh * kw)
    y = cols @ wmat.T + bias.data  # [N, out_h*out_w, K]
    out = Tensor(y.transpose(0, 2, 1).reshape(n, k, out_h, out_w))

    def bwd(g):
        g2 = g.reshape(n, k, out_h * out_w).transpose(0, 2, 1)  # [N, HW, K]
        if bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=(0, 1)))
        if kernel.requires_grad:
            gk = np.tensordot(g2, cols, axes=([0, 1], [0, 1]))  # [K, C*kh*kw]
            kernel.accumulate_grad(gk.reshape(k, c, kh, kw))
        if x.requires_grad:
            gcols = g2 @ wmat  # [N, HW, C*kh*kw]
            gcols = gcols.reshape(n, out_h, out_w, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                    ] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gx = gxp[:, :, padding:-padding, padding:-padding]
            else:
                gx = gxp
            x.accumulate_grad(gx)

    return _record(out, (x, kernel, bias), bwd)


# ---------------------------------------------------------------------------
# cost-volume builders


def correlate_disparity(left, right, max_disp):
    """Correlation cost volume.

    out[n, d, i, j] = mean_c left[n, c, i, j] * right[n, c, i, j - d],
    with out-of-bounds (j - d < 0) contributing zero.
    """
    left, right = _as_tensor(left), _as_tensor(right)
    if left.shape != right.shape:
        raise ValueError(
            "feature shapes differ: {} vs {}".format(tuple(left.shape), tuple(right.shape))
        )
    n, c, h, w = left.shape
    if max_disp > w:
        raise ValueError("max_disp {} exceeds feature width {}".format(max_disp, w))
    out_data = np.zeros((n, max_disp, h, w))
    for d in range(max_disp):
        out_data[:, d, :, d:] = (left.data[:, :, :, d:] * right.data[:, :, :, : w - d]).mean(
            axis=1
        )
    out = Tensor(out_data)

    def bwd(g):
        inv_c = 1.0 / c
        if left.requires_grad:
            gl = np.zeros_like(left.data)
            for d in range(max_disp):
                gl[:, :, :, d:] += inv_c * right.data[:, :, :, : w - d] * g[:, d : d + 1, :, d:]
            left.accumulate_grad(gl)
        if right.requires_grad:
            gr = np.zeros_like(right.data)
            for d in range(max_disp):
                gr[:, :, :, : w - d] += inv_c * left.data[:, :, :, d:] * g[:, d : d + 1, :, d:]
            right.accumulate_grad(gr)

    return _record(out, (left, right), bwd)


def stack_shift(left, right, max_disp):
    """Concatenation cost volume flattened to the channel dimension.

    For each candidate disparity d, channels [2C*d, 2C*d + 2C) hold the
    left features followed by the right features shifted right by d
    (zero-filled where j - d < 0).
    """
    left, right = _as_tensor(left), _as_tensor(right)
    if left.shape != right.shape:
        raise ValueError(
            "feature shapes differ: {} vs {}".format(tuple(left.shape), tuple(right.shape))
        )
    n, c, h, w = left.shape
    if max_disp > w:
        raise ValueError("max_disp {} exceeds feature width {}".format(max_disp, w))
    out_data = np.zeros((n, 2 * c * max_disp, h, w))
    for d in range(max_disp):
        base = 2 * c * d
        out_data[:, base : base + c] = left.data
        out_data[:, base + c : base + 2 * c, :, d:] = right.data[:, :, :, : w - d]
    out = Tensor(out_data)

    def bwd(g):
        if left.requires_grad:
            gl = np.zeros_like(left.data)
            for d in range(max_disp):
                base = 2 * c * d
                gl += g[:, base : base + c]
            left.accumulate_grad(gl)
        if right.requires_grad:
            gr = np.zeros_like(right.data)
            for d in range(max_disp):
                base = 2 * c * d
                gr[:, :, :, : w - d] += g[:, base + c : base + 2 * c, :, d:]
            right.accumulate_grad(gr)

    return _record(out, (left, right), bwd)


def soft_argmin(cost):
    """Expected disparity under softmax over negated costs.

    cost: [N, D, H, W] -> [N, H, W], values in [0, D-1].
    """
    cost = _as_tensor(cost)
    n, d, h, w = cost.shape
    s = -cost.data
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=1, keepdims=True)  # [N, D, H, W]
    levels = np.arange(d, dtype=np.float64).reshape(1, d, 1, 1)
    y = (levels * p).sum(axis=1)  # [N, H, W]
    out = Tensor(y)

    def bwd(g):
        if cost.requires_grad:
            # dy/dc_k = -p_k * (k - y)
            gc = -p * (levels - y[:, None, :, :]) * g[:, None, :, :]
            cost.accumulate_grad(gc)

    return _record(out, (cost,), bwd)


def softmax_weights(cost):
    """The softmax(-cost) channel weights used by soft_argmin (no grad)."""
    if isinstance(cost, Tensor):
        cost = cost.data
    s = -np.asarray(cost, dtype=np.float64)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# resize (forward only)


def bilinear_resize(x, out_h, out_w):
    """Bilinear resampling (align_corners=False). Forward only.

    Resizing to the identical size returns a bitwise-equal copy.
    """
    x = _as_tensor(x)
    if x.requires_grad:
        raise ValueError("bilinear_resize is forward-only; detach the input first")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return Tensor(x.data.copy())
    return Tensor(resize_bilinear_array(x.data, out_h, out_w))


def resize_bilinear_array(arr, out_h, out_w):
    """Bilinear resize of a [..., H, W] float array (align_corners=False)."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]
    if (out_h, out_w) == (h, w):
        return arr.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)

    top = arr[..., y0, :][..., :, x0] * (1 - wx) + arr[..., y0, :][..., :, x1] * wx
    bot = arr[..., y1, :][..., :, x0] * (1 - wx) + arr[..., y1, :][..., :, x1] * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


def resize_bilinear_adjoint_array(arr, out_h, out_w):
    """Transpose of resize_bilinear_array: scatter [..., h, w] -> [..., out_h, out_w].

    If R maps an (out_h, out_w) image to arr's (h, w) extent, this computes
    R^T arr, i.e. it routes each value back to the source pixels it was
    interpolated from, with the same bilinear weights.
    """
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]
    if (out_h, out_w) == (h, w):
        return arr.copy()
    ys = (np.arange(h) + 0.5) * (out_h / h) - 0.5
    xs = (np.arange(w) + 0.5) * (out_w / w) - 0.5
    y0 = np.clip(np.floor(ys), 0, out_h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, out_w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, out_h - 1)
    x1 = np.minimum(x0 + 1, out_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)

    out = np.zeros(arr.shape[:-2] + (out_h, out_w), dtype=np.float64)
    flat = out.reshape(-1, out_h, out_w)
    src = arr.reshape(-1, h, w)
    yw = [(y0, 1 - wy), (y1, wy)]
    xw = [(x0, 1 - wx), (x1, wx)]
    for yi, wyi in yw:
        for xi, wxi in xw:
            weighted = src * wyi[:, None] * wxi
            for k in range(flat.shape[0]):
                np.add.at(flat[k], (yi[:, None], xi[None, :]), weighted[k])
    return out


def resize_nearest_array(arr, out_h, out_w):
    """Nearest-neighbor resize of a [..., H, W] array."""
    arr = np.asarray(arr)
    h, w = arr.shape[-2:]
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return arr[..., ys, :][..., :, xs]


# ---------------------------------------------------------------------------
# loss


def huber_loss(pred, target, valid, threshold=1.0):
    """Smooth-L1 (Huber) loss averaged over valid pixels.

    pred: Tensor [H, W]; target: array [H, W]; valid: boolean mask [H, W].
    """
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != target.shape or pred.shape != valid.shape:
        raise ValueError(
            "shape mismatch: pred {}, target {}, valid {}".format(
                tuple(pred.shape), target.shape, valid.shape
            )
        )
    count = int(valid.sum())
    if count == 0:
        raise ValueError("loss undefined: ground truth has no valid pixels")
    diff = pred.data - target
    absd = np.abs(diff)
    quad = absd <= threshold
    per_pixel = np.where(quad, 0.5 * diff * diff / threshold, absd - 0.5 * threshold)
    out = Tensor(np.asarray(per_pixel[valid].sum() / count))

    def bwd(g):
        if pred.requires_grad:
            gp = np.where(quad, diff / threshold, np.sign(diff))
            gp = np.where(valid, gp, 0.0) * (np.asarray(g).item() / count)
            pred.accumulate_grad(gp)

    return _record(out, (pred,), bwd)
