"""Gradient-based stereo perturbation methods and noise baselines.

Methods: single-step sign-of-gradient (fgsm), its iterative variant
(ifgsm), the momentum variant with L1-normalized gradients (mifgsm), and
the diverse-inputs variants (di2fgsm, mdi2fgsm) that randomly resize and
zero-pad the inputs during gradient computation to improve cross-model
transfer. Gaussian and uniform noise serve as baselines.

Every produced perturbation satisfies max|v| <= epsilon exactly, per
side, and a non-targeted side is identically zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import (
    Tape,
    Tensor,
    resize_bilinear_adjoint_array,
    resize_bilinear_array,
    resize_nearest_array,
)
from .data_io import StereoSample
from .metrics import DisparityMap

METHODS = (
    "fgsm",
    "ifgsm",
    "mifgsm",
    "di2fgsm",
    "mdi2fgsm",
    "gaussian_noise",
    "uniform_noise",
)
GRADIENT_METHODS = ("fgsm", "ifgsm", "mifgsm", "di2fgsm", "mdi2fgsm")
TARGETS = ("both", "left_only", "right_only")

__all__ = [
    "AttackConfig",
    "Perturbation",
    "craft",
    "fgsm",
    "ifgsm",
    "mifgsm",
    "di2fgsm",
    "mdi2fgsm",
    "random_noise",
    "diverse_transform",
    "apply",
    "default_alpha",
    "save_perturbation",
    "load_perturbation",
    "METHODS",
    "TARGETS",
]


def default_alpha(epsilon, steps=40):
    """Step-size schedule: eps/N for small norms, 0.10*eps at eps = 0.02."""
    if epsilon >= 0.02:
        return 0.10 * epsilon
    return epsilon / steps


@dataclass
class AttackConfig:
    method: str = "fgsm"
    epsilon: float = 0.02
    alpha: float | None = None
    steps: int = 40
    momentum_beta: float = 0.47
    resize_h_range: tuple = (0.90, 1.00)
    resize_w_range: tuple = (0.90, 1.00)
    transform_prob: float = 0.50
    target: str = "both"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError("unknown attack method {!r}".format(self.method))
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in (0, 1]")
        if self.alpha is None:
            self.alpha = default_alpha(self.epsilon, self.steps)
        if not (0.0 < self.alpha <= self.epsilon):
            raise ValueError("alpha must lie in (0, epsilon]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0.0 <= self.momentum_beta < 1.0):
            raise ValueError("momentum_beta must lie in [0, 1)")
        for lo, hi in (self.resize_h_range, self.resize_w_range):
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError("resize range must satisfy 0 < lo <= hi <= 1")
        if not (0.0 <= self.transform_prob <= 1.0):
            raise ValueError("transform_prob must lie in [0, 1]")
        if self.target not in TARGETS:
            raise ValueError("unknown target {!r}".format(self.target))


@dataclass
class Perturbation:
    v_left: np.ndarray  # [3, H, W]
    v_right: np.ndarray  # [3, H, W]
    epsilon: float
    method: str = ""
    target: str = "both"
    source_model: str = ""

    def __post_init__(self):
        self.v_left = np.asarray(self.v_left, dtype=np.float64)
        self.v_right = np.asarray(self.v_right, dtype=np.float64)
        if self.v_left.shape != self.v_right.shape:
            raise ValueError("perturbation sides have different shapes")
        for name, v in (("v_left", self.v_left), ("v_right", self.v_right)):
            if np.abs(v).max(initial=0.0) > self.epsilon:
                raise ValueError("{} violates the L-infinity budget".format(name))
        if self.target == "left_only" and np.any(self.v_right):
            raise ValueError("left_only perturbation has nonzero v_right")
        if self.target == "right_only" and np.any(self.v_left):
            raise ValueError("right_only perturbation has nonzero v_left")

    @classmethod
    def zeros_like(cls, sample: StereoSample, epsilon, **kw):
        z = np.zeros_like(sample.left)
        return cls(z, z.copy(), epsilon, **kw)


def apply(perturbation: Perturbation, sample: StereoSample) -> StereoSample:
    """Perturbed sample: images clamped to [0, 1], ground truth untouched."""
    if perturbation.v_left.shape != sample.left.shape:
        raise ValueError(
            "perturbation shape {} != image shape {}".format(
                perturbation.v_left.shape, sample.left.shape
            )
        )
    return StereoSample(
        np.clip(sample.left + perturbation.v_left, 0.0, 1.0),
        np.clip(sample.right + perturbation.v_right, 0.0, 1.0),
        sample.gt,
        id=sample.id,
        next_frame=sample.next_frame,
    )


def _input_gradients(params, left_img, right_img, gt: DisparityMap):
    """Gradients of the training loss w.r.t. both (clamped) input images."""
    lt = Tensor(np.clip(left_img, 0.0, 1.0), requires_grad=True)
    rt = Tensor(np.clip(right_img, 0.0, 1.0), requires_grad=True)
    params.set_requires_grad(False)
    with Tape():
        pred = models.forward(params, lt, rt)
        sample_loss = models.loss(pred, gt)
    ad.backward(sample_loss)
    gl = lt.grad if lt.grad is not None else np.zeros_like(lt.data)
    gr = rt.grad if rt.grad is not None else np.zeros_like(rt.data)
    if not (np.isfinite(gl).all() and np.isfinite(gr).all()):
        raise FloatingPointError("non-finite input gradient")
    return gl, gr


def _sign(g):
    # sign(0) = 0: no budget spent where the attack has no signal
    return np.sign(g)


def _mask_target(vl, vr, target):
    if target == "left_only":
        vr = np.zeros_like(vr)
    elif target == "right_only":
        vl = np.zeros_like(vl)
    return vl, vr


def fgsm(params, sample: StereoSample, cfg: AttackConfig) -> Perturbation:
    """Single-step attack: v_I = epsilon * sign(grad_I)."""
    if cfg.method != "fgsm":
        raise ValueError("config method is {!r}, expected fgsm".format(cfg.method))
    gl, gr = _input_gradients(params, sample.left, sample.right, sample.gt)
    vl = cfg.epsilon * _sign(gl)
    vr = cfg.epsilon * _sign(gr)
    vl, vr = _mask_target(vl, vr, cfg.target)
    return Perturbation(vl, vr, cfg.epsilon, method="fgsm", target=cfg.target)


def _iterate(params, sample, cfg, use_momentum, use_diversity):
    """Shared loop behind ifgsm / mifgsm / di2fgsm / mdi2fgsm.

    Per step: (re)compute the loss gradient at the current perturbed
    inputs, optionally on a randomly resized-and-padded copy (with the
    ground truth rescaled to match), optionally fold it into an L1-
    normalized momentum buffer, then accumulate the sign step and clip
    to the epsilon ball.
    """
    eps, alpha = cfg.epsilon, cfg.alpha
    vl = np.zeros_like(sample.left)
    vr = np.zeros_like(sample.right)
    ml = np.zeros_like(vl)
    mr = np.zeros_like(vr)
    rng = np.random.default_rng(cfg.seed)

    for _n in range(cfg.steps):
        if use_diversity and rng.uniform() < cfg.transform_prob:
            h = rng.uniform(*cfg.resize_h_range)
            w = rng.uniform(*cfg.resize_w_range)
            height, width = sample.height, sample.width
            new_h = int(round(h * height))
            new_w = int(round(w * width))
            top = int(rng.integers(0, height - new_h + 1))
            left_off = int(rng.integers(0, width - new_w + 1))
            tl, tgt = diverse_transform(sample.left, sample.gt, h, w, (top, left_off))
            tr, _ = diverse_transform(sample.right, sample.gt, h, w, (top, left_off))
            tvl = _transform_field(vl, h, w, (top, left_off))
            tvr = _transform_field(vr, h, w, (top, left_off))
            gl, gr = _input_gradients(params, tl + tvl, tr + tvr, tgt)
            # the transform is linear, so the chain rule maps the gradient
            # back to the original frame through its transpose
            gl = _transform_adjoint(gl, h, w, (top, left_off))
            gr = _transform_adjoint(gr, h, w, (top, left_off))
        else:
            gl, gr = _input_gradients(params, sample.left + vl, sample.right + vr, sample.gt)

        if use_momentum:
            gl = _l1_normalize(gl)
            gr = _l1_normalize(gr)
            beta = cfg.momentum_beta
            ml = beta * ml + (1.0 - beta) * gl
            mr = beta * mr + (1.0 - beta) * gr
            step_l, step_r = ml, mr
        else:
            step_l, step_r = gl, gr

        if cfg.target != "right_only":
            vl = np.clip(vl + alpha * _sign(step_l), -eps, eps)
        if cfg.target != "left_only":
            vr = np.clip(vr + alpha * _sign(step_r), -eps, eps)

    vl, vr = _mask_target(vl, vr, cfg.target)
    return Perturbation(vl, vr, eps, method=cfg.method, target=cfg.target)


def _l1_normalize(g):
    norm = np.abs(g).sum()
    if norm == 0.0:
        return np.zeros_like(g)
    return g / norm


def ifgsm(params, sample, cfg: AttackConfig) -> Perturbation:
    """Iterative sign-of-gradient attack with per-step clipping."""
    if cfg.method != "ifgsm":
        raise ValueError("config method is {!r}, expected ifgsm".format(cfg.method))
    return _iterate(params, sample, cfg, use_momentum=False, use_diversity=False)


def mifgsm(params, sample, cfg: AttackConfig) -> Perturbation:
    """Momentum iterative attack with L1-normalized gradients."""
    if cfg.method != "mifgsm":
        raise ValueError("config method is {!r}, expected mifgsm".format(cfg.method))
    return _iterate(params, sample, cfg, use_momentum=True, use_diversity=False)


def di2fgsm(params, sample, cfg: AttackConfig) -> Perturbation:
    """Diverse-inputs iterative attack (random resize-and-pad per step)."""
    if cfg.method != "di2fgsm":
        raise ValueError("config method is {!r}, expected di2fgsm".format(cfg.method))
    return _iterate(params, sample, cfg, use_momentum=False, use_diversity=True)


def mdi2fgsm(params, sample, cfg: AttackConfig) -> Perturbation:
    """Momentum + diverse-inputs iterative attack."""
    if cfg.method != "mdi2fgsm":
        raise ValueError("config method is {!r}, expected mdi2fgsm".format(cfg.method))
    return _iterate(params, sample, cfg, use_momentum=True, use_diversity=True)


def random_noise(sample: StereoSample, cfg: AttackConfig) -> Perturbation:
    """Gaussian N(0, (eps/4)^2) (clipped to the budget) or uniform U(-eps, eps)."""
    if cfg.method not in ("gaussian_noise", "uniform_noise"):
        raise ValueError("config method is {!r}, expected a noise method".format(cfg.method))
    rng = np.random.default_rng(cfg.seed)
    shape = sample.left.shape
    eps = cfg.epsilon
    if cfg.method == "gaussian_noise":
        vl = np.clip(rng.normal(0.0, eps / 4.0, size=shape), -eps, eps)
        vr = np.clip(rng.normal(0.0, eps / 4.0, size=shape), -eps, eps)
    else:
        vl = rng.uniform(-eps, eps, size=shape)
        vr = rng.uniform(-eps, eps, size=shape)
    vl, vr = _mask_target(vl, vr, cfg.target)
    return Perturbation(vl, vr, eps, method=cfg.method, target=cfg.target)


_DISPATCH = {
    "fgsm": fgsm,
    "ifgsm": ifgsm,
    "mifgsm": mifgsm,
    "di2fgsm": di2fgsm,
    "mdi2fgsm": mdi2fgsm,
}


def craft(params, sample: StereoSample, cfg: AttackConfig) -> Perturbation:
    """Run the configured attack (or noise baseline) on one sample."""
    if cfg.method in _DISPATCH:
        return _DISPATCH[cfg.method](params, sample, cfg)
    return random_noise(sample, cfg)


# ---------------------------------------------------------------------------
# diverse-inputs transform


def _transform_field(field_3hw, h, w, offsets):
    """Resize-and-pad an image-shaped field (zeros padding)."""
    c, height, width = field_3hw.shape
    new_h = int(round(h * height))
    new_w = int(round(w * width))
    top, left = offsets
    if top < 0 or left < 0 or top + new_h > height or left + new_w > width:
        raise ValueError("pad offsets out of range")
    resized = resize_bilinear_array(field_3hw, new_h, new_w)
    out = np.zeros_like(field_3hw)
    out[:, top : top + new_h, left : left + new_w] = resized
    return out


def _transform_adjoint(field_3hw, h, w, offsets):
    """Transpose of _transform_field: crop the pad, scatter the resize."""
    c, height, width = field_3hw.shape
    new_h = int(round(h * height))
    new_w = int(round(w * width))
    top, left = offsets
    cropped = field_3hw[:, top : top + new_h, left : left + new_w]
    return resize_bilinear_adjoint_array(cropped, height, width)


def diverse_transform(image, disparity: DisparityMap, h, w, pad_offsets):
    """Resize by (h, w) and zero-pad back to the original extent.

    The image is resampled bilinearly; the disparity map is resampled
    nearest-neighbor, its values multiplied by w (horizontal rescale
    changes disparity magnitude), and the padded region marked invalid.
    h = w = 1 is the identity on image, disparity, and mask.
    """
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[-2:]
    new_h = int(round(h * height))
    new_w = int(round(w * width))
    top, left = pad_offsets
    if top < 0 or left < 0 or top + new_h > height or left + new_w > width:
        raise ValueError("pad offsets out of range")
    if (new_h, new_w) == (height, width):
        return image.copy(), DisparityMap(disparity.values.copy(), disparity.valid.copy())

    out_img = _transform_field(image, h, w, pad_offsets)
    values = np.zeros((height, width))
    valid = np.zeros((height, width), dtype=bool)
    values[top : top + new_h, left : left + new_w] = (
        resize_nearest_array(disparity.values, new_h, new_w) * w
    )
    valid[top : top + new_h, left : left + new_w] = resize_nearest_array(
        disparity.valid, new_h, new_w
    )
    return out_img, DisparityMap(values, valid)


# ---------------------------------------------------------------------------
# perturbation files
#
# magic "SPGN", version u8, method u8, target u8, f64 epsilon, u32 H,
# u32 W, then v_left and v_right as little-endian f64 rasters (3*H*W each).

_MAGIC = b"SPGN"
_VERSION = 1


def save_perturbation(p: Perturbation, path):
    _, h, w = p.v_left.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(
            struct.pack(
                "<BBBdII",
                _VERSION,
                METHODS.index(p.method),
                TARGETS.index(p.target),
                p.epsilon,
                h,
                w,
            )
        )
        f.write(p.v_left.astype("<f8").tobytes())
        f.write(p.v_right.astype("<f8").tobytes())


def load_perturbation(path) -> Perturbation:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("bad magic: not a perturbation file")
        header = f.read(struct.calcsize("<BBBdII"))
        if len(header) != struct.calcsize("<BBBdII"):
            raise ValueError("truncated perturbation header")
        version, method_idx, target_idx, eps, h, w = struct.unpack("<BBBdII", header)
        if version != _VERSION:
            raise ValueError("unsupported perturbation file version {}".format(version))
        if method_idx >= len(METHODS) or target_idx >= len(TARGETS):
            raise ValueError("corrupt perturbation header (method/target code)")
        count = 3 * h * w
        buf = f.read(2 * 8 * count)
        if len(buf) != 2 * 8 * count:
            raise ValueError("truncated perturbation payload")
        raster = np.frombuffer(buf, dtype="<f8")
        vl = raster[:count].reshape(3, h, w).copy()
        vr = raster[count:].reshape(3, h, w).copy()
        if f.read(1):
            raise ValueError("trailing bytes after perturbation payload")
    return Perturbation(
        vl, vr, eps, method=METHODS[method_idx], target=TARGETS[target_idx]
    )
