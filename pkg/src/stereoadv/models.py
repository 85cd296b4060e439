"""Miniature differentiable stereo networks and their training loop.

Two architecture families:

* CorrNet ("correlation"): shared conv trunk -> correlation cost volume
  -> 2D aggregation convs over the D-channel volume -> soft-argmin.
* StackNet ("stacking"): shared conv trunk -> per-disparity feature
  concatenation flattened to 2*C*D channels -> aggregation convs mapping
  down to D channels -> soft-argmin.

Both accept [3, H, W] images in [0, 1] and emit an [H, W] disparity map
in [0, max_disparity - 1], differentiable with respect to images and
parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .metrics import DisparityMap

LEAKY_SLOPE = 0.1

# Fixed sharpening gain applied to the cost volume after the last
# aggregation conv. The softmax over D levels needs O(10) gaps between
# the best and runner-up costs to commit to a disparity; without the
# gain the soft-argmin output collapses toward the mid-range mean.
COST_GAIN = 16.0

# Per-tensor L2 cap on parameter gradients during SGD. The soft-argmin
# head can emit a huge rank-one gradient into the last aggregation conv
# early in training; an unclipped step saturates the softmax and kills
# all subsequent gradients.
GRAD_CLIP = 1.0

FAMILIES = ("correlation", "stacking")

__all__ = [
    "ArchitectureSpec",
    "ModelParams",
    "init_params",
    "forward",
    "loss",
    "train",
    "save_params",
    "load_params",
]


@dataclass
class ArchitectureSpec:
    family: str = "correlation"
    feature_channels: int = 16
    num_feature_layers: int = 3
    num_aggregation_layers: int = 3
    max_disparity: int = 32

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError("unknown family {!r}".format(self.family))
        if self.max_disparity < 2:
            raise ValueError("max_disparity must be >= 2")
        if self.num_feature_layers < 1 or self.num_aggregation_layers < 1:
            raise ValueError("layer counts must be >= 1")
        if self.feature_channels < 1:
            raise ValueError("feature_channels must be >= 1")


def _layer_plan(spec: ArchitectureSpec):
    """Kernel shapes [(K, C, kh, kw), ...] for trunk then aggregation."""
    c, d = spec.feature_channels, spec.max_disparity
    plan = [(c, 3, 3, 3)]
    plan += [(c, c, 3, 3)] * (spec.num_feature_layers - 1)
    if spec.family == "correlation":
        plan += [(d, d, 3, 3)] * spec.num_aggregation_layers
    else:
        stacked = 2 * c * d
        if spec.num_aggregation_layers == 1:
            plan += [(d, stacked, 1, 1)]
        else:
            hidden = 2 * d
            # 1x1 reduction first: keeps the wide stacked volume cheap.
            plan += [(hidden, stacked, 1, 1)]
            plan += [(hidden, hidden, 3, 3)] * (spec.num_aggregation_layers - 2)
            plan += [(d, hidden, 3, 3)]
    return plan


class ModelParams:
    """Weights of one miniature stereo network."""

    def __init__(self, spec: ArchitectureSpec, layers, training_seed=0):
        self.spec = spec
        self.layers = layers  # list of (kernel Tensor, bias Tensor)
        self.training_seed = training_seed
        self.loss_history = []
        expected = _layer_plan(spec)
        if len(layers) != len(expected):
            raise ValueError(
                "expected {} layers, got {}".format(len(expected), len(layers))
            )
        for (k, b), shape in zip(layers, expected):
            if tuple(k.shape) != shape:
                raise ValueError(
                    "kernel shape {} inconsistent with spec (wanted {})".format(
                        tuple(k.shape), shape
                    )
                )
            if tuple(b.shape) != (shape[0],):
                raise ValueError("bias shape {} inconsistent".format(tuple(b.shape)))

    def copy(self):
        out = ModelParams(
            self.spec,
            [(Tensor(k.data.copy()), Tensor(b.data.copy())) for k, b in self.layers],
            self.training_seed,
        )
        out.loss_history = list(self.loss_history)
        return out

    def parameters(self):
        for k, b in self.layers:
            yield k
            yield b

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def init_params(spec: ArchitectureSpec, seed=0) -> ModelParams:
    """Deterministic initialization: Kaiming trunk, structured aggregation.

    The trunk uses fan-in scaled uniform weights. The aggregation stack is
    initialized so that at step zero it already computes a sensible cost
    volume (smoothing plus a matching score per disparity); starting the
    aggregation from random weights leaves the soft-argmin output constant
    and its gradient identically zero, so training never escapes.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for k_out, c_in, kh, kw in _layer_plan(spec):
        fan_in = c_in * kh * kw
        bound = np.sqrt(6.0 / fan_in)
        kernel = Tensor(rng.uniform(-bound, bound, size=(k_out, c_in, kh, kw)))
        bias = Tensor(np.zeros(k_out))
        layers.append((kernel, bias))
    _structure_aggregation(spec, layers, rng)
    return ModelParams(spec, layers, training_seed=seed)


def _box_identity(kernel):
    """Overwrite a conv kernel with a per-channel box (smoothing) filter."""
    k_out, c_in, kh, kw = kernel.data.shape
    kernel.data[:] = 0.0
    for c in range(min(k_out, c_in)):
        kernel.data[c, c, :, :] = 1.0 / (kh * kw)


def _structure_aggregation(spec, layers, rng):
    agg = [k for k, _b in layers[spec.num_feature_layers :]]
    if spec.family == "correlation":
        # Smooth the correlation volume per disparity channel, then negate
        # it so the aggregation output is a cost (low = likely match).
        for kernel in agg[:-1]:
            _box_identity(kernel)
        last = agg[-1]
        last.data[:] = 0.0
        k_out, c_in, kh, kw = last.data.shape
        for d in range(min(k_out, c_in)):
            last.data[d, d, kh // 2, kw // 2] = -1.0
        return
    if len(agg) < 2:
        # A single linear layer cannot express a rectified matching score;
        # leave the random weights in place.
        return
    c, d_max = spec.feature_channels, spec.max_disparity
    # First (1x1) layer: units 2d and 2d+1 compute +/- a random projection
    # of (left - shifted right) within disparity group d, so after the
    # leaky activation their sum is proportional to |difference|.
    first = agg[0]
    first.data[:] = 0.0
    for d in range(d_max):
        w = rng.uniform(-1.0, 1.0, c)
        w /= np.sqrt((w * w).sum())
        base = 2 * c * d
        first.data[2 * d, base : base + c, 0, 0] = w
        first.data[2 * d, base + c : base + 2 * c, 0, 0] = -w
        first.data[2 * d + 1, base : base + c, 0, 0] = -w
        first.data[2 * d + 1, base + c : base + 2 * c, 0, 0] = w
    for kernel in agg[1:-1]:
        _box_identity(kernel)
    # Last layer: average each rectified +/- pair into a matching cost.
    last = agg[-1]
    last.data[:] = 0.0
    area = last.data.shape[2] * last.data.shape[3]
    scale = 1.0 / ((1.0 - LEAKY_SLOPE) * area)
    for d in range(d_max):
        last.data[d, 2 * d, :, :] = scale
        last.data[d, 2 * d + 1, :, :] = scale


def _validate_images(spec, left, right):
    for name, img in (("left", left), ("right", right)):
        data = img.data if isinstance(img, Tensor) else np.asarray(img)
        if data.ndim != 3 or data.shape[0] != 3:
            raise ValueError("{} image must be [3, H, W], got {}".format(name, data.shape))
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("{} image values must lie in [0, 1]".format(name))
        if not np.isfinite(data).all():
            raise ValueError("{} image contains non-finite values".format(name))
    ldata = left.data if isinstance(left, Tensor) else np.asarray(left)
    rdata = right.data if isinstance(right, Tensor) else np.asarray(right)
    if ldata.shape != rdata.shape:
        raise ValueError("left/right shapes differ")
    if ldata.shape[2] < spec.max_disparity:
        raise ValueError(
            "image width {} < max_disparity {}".format(ldata.shape[2], spec.max_disparity)
        )


def _trunk(params, image4):
    # No activation after the final layer: zero-mean features make the
    # matching dot product peak at the true disparity already at init.
    x = image4
    n_feat = params.spec.num_feature_layers
    for idx, (k, b) in enumerate(params.layers[:n_feat]):
        pad = k.shape[2] // 2
        x = ad.conv2d(x, k, b, stride=1, padding=pad)
        if idx < n_feat - 1:
            x = ad.leaky_relu(x, LEAKY_SLOPE)
    return x


def forward(params: ModelParams, left, right):
    """Predicted disparity [H, W] for one stereo pair.

    ``left`` and ``right`` may be numpy arrays or (requires_grad) Tensors;
    call inside a Tape to obtain gradients.
    """
    spec = params.spec
    _validate_images(spec, left, right)
    left_t = left if isinstance(left, Tensor) else Tensor(left)
    right_t = right if isinstance(right, Tensor) else Tensor(right)

    l4 = _reshape4(left_t)
    r4 = _reshape4(right_t)
    lf = _trunk(params, l4)
    rf = _trunk(params, r4)

    if spec.family == "correlation":
        vol = ad.correlate_disparity(lf, rf, spec.max_disparity)
    else:
        vol = ad.stack_shift(lf, rf, spec.max_disparity)

    agg = params.layers[spec.num_feature_layers :]
    x = vol
    for idx, (k, b) in enumerate(agg):
        pad = k.shape[2] // 2
        x = ad.conv2d(x, k, b, stride=1, padding=pad)
        if idx < len(agg) - 1:
            x = ad.leaky_relu(x, LEAKY_SLOPE)
    x = ad.mul(x, COST_GAIN)
    disp = ad.soft_argmin(x)  # [1, H, W]
    return _reshape_hw(disp)


def _reshape4(t: Tensor):
    out = Tensor(t.data.reshape((1,) + t.data.shape))

    def bwd(g):
        if t.requires_grad:
            t.accumulate_grad(g.reshape(t.data.shape))

    return ad._record(out, (t,), bwd)


def _reshape_hw(t: Tensor):
    out = Tensor(t.data.reshape(t.data.shape[1:]))

    def bwd(g):
        if t.requires_grad:
            t.accumulate_grad(g.reshape(t.data.shape))

    return ad._record(out, (t,), bwd)


def loss(pred: Tensor, gt: DisparityMap):
    """Smooth-L1 (threshold 1.0) averaged over valid ground-truth pixels."""
    return ad.huber_loss(pred, gt.values, gt.valid, threshold=1.0)


def train(params: ModelParams, dataset, epochs, learning_rate, seed=0, momentum=0.9):
    """SGD with momentum over per-epoch shuffled samples.

    Returns a new ModelParams; ``loss_history`` holds the mean loss of
    each epoch. Deterministic for fixed inputs and seed.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    params = params.copy()
    if epochs == 0:
        return params
    rng = np.random.default_rng(seed)
    velocity = [np.zeros_like(p.data) for p in params.parameters()]
    plist = list(params.parameters())

    for _epoch in range(epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for idx in order:
            sample = dataset[idx]
            params.set_requires_grad(True)
            params.zero_grad()
            with Tape():
                pred = forward(params, sample.left, sample.right)
                sample_loss = loss(pred, sample.gt)
            value = sample_loss.data.item()
            if not np.isfinite(value):
                raise FloatingPointError(
                    "non-finite training loss on sample {!r}".format(sample.id)
                )
            ad.backward(sample_loss)
            for p, v in zip(plist, velocity):
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                norm = np.sqrt((g * g).sum())
                if norm > GRAD_CLIP:
                    g = g * (GRAD_CLIP / norm)
                v *= momentum
                v += g
                p.data -= learning_rate * v
            epoch_loss += value
        params.loss_history.append(epoch_loss / len(dataset))

    params.set_requires_grad(False)
    params.zero_grad()
    return params


def predict(params: ModelParams, sample) -> DisparityMap:
    """Disparity prediction as a DisparityMap (all pixels valid)."""
    pred = forward(params, sample.left, sample.right)
    return DisparityMap.from_prediction(pred.data)


# ---------------------------------------------------------------------------
# parameter files
#
# magic "SPGM", version u8, family u8, u32 x (feature_channels,
# num_feature_layers, num_aggregation_layers, max_disparity, layer_count),
# then per layer two entries (kernel, bias): u32 rank, u32 dims...,
# little-endian f64 payload.

_MAGIC = b"SPGM"
_VERSION = 1


def save_params(params: ModelParams, path):
    spec = params.spec
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BB", _VERSION, FAMILIES.index(spec.family)))
        f.write(
            struct.pack(
                "<5I",
                spec.feature_channels,
                spec.num_feature_layers,
                spec.num_aggregation_layers,
                spec.max_disparity,
                len(params.layers),
            )
        )
        for kernel, bias in params.layers:
            for t in (kernel, bias):
                dims = t.data.shape
                f.write(struct.pack("<I", len(dims)))
                f.write(struct.pack("<{}I".format(len(dims)), *dims))
                f.write(t.data.astype("<f8").tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated parameter file while reading {}".format(what))
    return buf


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != _MAGIC:
            raise ValueError("bad magic: not a model parameter file")
        version, family_idx = struct.unpack("<BB", _read_exact(f, 2, "header"))
        if version != _VERSION:
            raise ValueError("unsupported format version {}".format(version))
        if family_idx >= len(FAMILIES):
            raise ValueError("unknown family code {}".format(family_idx))
        fc, nfl, nal, d, layer_count = struct.unpack("<5I", _read_exact(f, 20, "spec"))
        spec = ArchitectureSpec(
            family=FAMILIES[family_idx],
            feature_channels=fc,
            num_feature_layers=nfl,
            num_aggregation_layers=nal,
            max_disparity=d,
        )
        expected = _layer_plan(spec)
        if layer_count != len(expected):
            raise ValueError(
                "layer count {} inconsistent with spec (expected {})".format(
                    layer_count, len(expected)
                )
            )
        layers = []
        for li in range(layer_count):
            pair = []
            for what in ("kernel", "bias"):
                (rank,) = struct.unpack("<I", _read_exact(f, 4, what + " rank"))
                if rank > 8:
                    raise ValueError("implausible tensor rank {}".format(rank))
                dims = struct.unpack(
                    "<{}I".format(rank), _read_exact(f, 4 * rank, what + " dims")
                )
                count = int(np.prod(dims)) if dims else 1
                payload = _read_exact(f, 8 * count, what + " payload")
                arr = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
                pair.append(Tensor(arr))
            layers.append((pair[0], pair[1]))
        if f.read(1):
            raise ValueError("trailing bytes after parameter payload")
    params = ModelParams(spec, layers)
    for p in params.parameters():
        if not np.isfinite(p.data).all():
            raise ValueError("parameter file contains non-finite values")
    return params
