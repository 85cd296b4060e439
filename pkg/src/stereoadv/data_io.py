"""Synthetic random-dot-stereogram generation, KITTI-format I/O, and reports.

Directory layout for datasets on disk:

    <root>/left/<id>.png    8-bit RGB
    <root>/right/<id>.png   8-bit RGB
    <root>/disp/<id>.png    16-bit single channel, value/256 px, 0 = invalid
    <root>/next/{left,right}/<id>.png   optional next-frame pair

Samples pair up lexicographically by <id>.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .metrics import DisparityMap, EvalReport

__all__ = [
    "StereoSample",
    "SceneSpec",
    "generate_rds",
    "generate_dataset",
    "load_kitti_sample",
    "save_sample",
    "load_dataset",
    "save_report",
    "load_report",
    "REPORT_HEADER",
]

REPORT_HEADER = [
    "condition",
    "model",
    "method",
    "epsilon",
    "target",
    "d1_all",
    "epe",
    "l1_left",
    "l1_right",
    "linf_left",
    "linf_right",
]


@dataclass
class StereoSample:
    """Rectified stereo pair with ground-truth disparity."""

    left: np.ndarray  # [3, H, W] in [0, 1]
    right: np.ndarray  # [3, H, W] in [0, 1]
    gt: DisparityMap
    id: str = ""
    next_frame: "StereoSample | None" = None

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        if self.left.shape != self.right.shape:
            raise ValueError(
                "left shape {} != right shape {}".format(self.left.shape, self.right.shape)
            )
        if self.left.ndim != 3 or self.left.shape[0] != 3:
            raise ValueError("images must be [3, H, W], got {}".format(self.left.shape))
        if self.gt.shape != self.left.shape[1:]:
            raise ValueError(
                "gt shape {} != image shape {}".format(self.gt.shape, self.left.shape[1:])
            )

    @property
    def height(self):
        return self.left.shape[1]

    @property
    def width(self):
        return self.left.shape[2]


@dataclass
class SceneSpec:
    """Parameters of one synthetic random-dot scene."""

    height: int = 64
    width: int = 128
    max_disparity: int = 32
    num_rectangles: int = 3
    disparity_levels: list = field(default_factory=lambda: [4, 8, 12])
    dot_density: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.dot_density <= 1.0):
            raise ValueError("dot_density must be in (0, 1]")
        for d in self.disparity_levels:
            if d >= self.max_disparity:
                raise ValueError(
                    "disparity level {} >= max_disparity {}".format(d, self.max_disparity)
                )
            if d < 0:
                raise ValueError("disparity levels must be non-negative")
        if self.width <= max(self.disparity_levels, default=0):
            raise ValueError("image too narrow for the requested disparities")


def generate_rds(spec: SceneSpec) -> StereoSample:
    """Random-dot stereogram with exact piecewise-constant ground truth.

    The left image is random dots quantized to the 8-bit grid (so PNG
    round-trips are exact). The right image is the left warped by the
    disparity field; for every valid (co-visible) pixel,
    right[i, j - d] == left[i, j] bitwise.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    levels = list(spec.disparity_levels)
    disp = np.full((h, w), levels[0], dtype=np.int64)

    for r in range(spec.num_rectangles):
        d = levels[1 + r % (len(levels) - 1)] if len(levels) > 1 else levels[0]
        rh = int(rng.integers(h // 4, max(h // 2, h // 4 + 1)))
        rw = int(rng.integers(w // 4, max(w // 2, w // 4 + 1)))
        if rh > h or rw > w:
            raise ValueError("rectangle exceeds image bounds")
        top = int(rng.integers(0, h - rh + 1))
        left_edge = int(rng.integers(0, w - rw + 1))
        disp[top : top + rh, left_edge : left_edge + rw] = d

    # Random dots on the 1/255 grid; dot_density < 1 leaves mid-gray gaps.
    dots = rng.integers(0, 256, size=(3, h, w)).astype(np.float64) / 255.0
    if spec.dot_density < 1.0:
        keep = rng.random((h, w)) < spec.dot_density
        gray = np.full((3, h, w), 128.0 / 255.0)
        dots = np.where(keep[None, :, :], dots, gray)
    left = dots

    # Warp: a left pixel (i, j) with disparity d lands at right column j - d.
    # When several left pixels land on one right column the largest
    # disparity (nearest surface) wins; losers are occluded -> invalid.
    right = rng.integers(0, 256, size=(3, h, w)).astype(np.float64) / 255.0
    valid = np.zeros((h, w), dtype=bool)
    cols = np.arange(w)
    for i in range(h):
        target = cols - disp[i]
        winner_disp = np.full(w, -1, dtype=np.int64)  # per right column
        winner_src = np.full(w, -1, dtype=np.int64)
        for j in range(w):
            t = target[j]
            if t < 0:
                continue
            if disp[i, j] > winner_disp[t]:
                winner_disp[t] = disp[i, j]
                winner_src[t] = j
        for t in range(w):
            j = winner_src[t]
            if j >= 0:
                right[:, i, t] = left[:, i, j]
                valid[i, j] = True

    gt = DisparityMap(disp.astype(np.float64), valid)
    return StereoSample(left, right, gt, id="rds_{:05d}".format(spec.seed))


def generate_dataset(count, height=64, width=128, max_disparity=32,
                     disparity_levels=None, num_rectangles=3, dot_density=1.0,
                     seed=0):
    """List of RDS samples with per-sample seeds derived from ``seed``."""
    if disparity_levels is None:
        # quarter / half / three-quarter depth planes scale with the range
        disparity_levels = [max_disparity // 4, max_disparity // 2,
                            (3 * max_disparity) // 4]
    samples = []
    for i in range(count):
        spec = SceneSpec(
            height=height,
            width=width,
            max_disparity=max_disparity,
            num_rectangles=num_rectangles,
            disparity_levels=list(disparity_levels),
            dot_density=dot_density,
            seed=seed * 100003 + i,
        )
        sample = generate_rds(spec)
        sample.id = "rds_{:05d}".format(i)
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# PNG I/O


def _read_image(path):
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0  # [H, W, 3]
    return arr.transpose(2, 0, 1)


def _write_image(path, arr):
    a = np.clip(np.asarray(arr), 0.0, 1.0)
    a = np.round(a * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(a, mode="RGB").save(path)


def _read_disparity(path):
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError("disparity PNG must be single channel: {}".format(path))
    values = arr.astype(np.float64) / 256.0
    valid = arr > 0
    return DisparityMap(values, valid)


def _write_disparity(path, gt: DisparityMap):
    coded = np.round(gt.values * 256.0).astype(np.uint32)
    coded = np.where(gt.valid, np.maximum(coded, 1), 0)  # 0 encodes invalid
    if coded.max() > 0xFFFF:
        raise ValueError("disparity too large for 16-bit encoding")
    Image.fromarray(coded.astype(np.uint16)).save(path)


def load_kitti_sample(left_path, right_path, disp_path, target_size=None, sample_id=None):
    """Load one KITTI-format sample (16-bit disparity PNG, value/256, 0 invalid).

    ``target_size=(H, W)`` optionally resizes images bilinearly and the
    disparity nearest-neighbor with values scaled by the width ratio.
    """
    from .autodiff import resize_bilinear_array, resize_nearest_array

    left = _read_image(left_path)
    right = _read_image(right_path)
    gt = _read_disparity(disp_path)
    if left.shape != right.shape:
        raise ValueError("left/right dimension mismatch")
    if gt.shape != left.shape[1:]:
        raise ValueError("disparity dimension mismatch")
    if target_size is not None:
        th, tw = target_size
        scale = tw / left.shape[2]
        left = resize_bilinear_array(left, th, tw)
        right = resize_bilinear_array(right, th, tw)
        values = resize_nearest_array(gt.values, th, tw) * scale
        valid = resize_nearest_array(gt.valid, th, tw)
        gt = DisparityMap(values, valid)
    if sample_id is None:
        sample_id = os.path.splitext(os.path.basename(left_path))[0]
    return StereoSample(left, right, gt, id=sample_id)


def save_sample(sample: StereoSample, root):
    """Write one sample into the dataset directory layout."""
    for sub in ("left", "right", "disp"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    _write_image(os.path.join(root, "left", sample.id + ".png"), sample.left)
    _write_image(os.path.join(root, "right", sample.id + ".png"), sample.right)
    _write_disparity(os.path.join(root, "disp", sample.id + ".png"), sample.gt)
    if sample.next_frame is not None:
        for sub in ("left", "right"):
            os.makedirs(os.path.join(root, "next", sub), exist_ok=True)
        nxt = sample.next_frame
        _write_image(os.path.join(root, "next", "left", sample.id + ".png"), nxt.left)
        _write_image(os.path.join(root, "next", "right", sample.id + ".png"), nxt.right)


def load_dataset(root):
    """Load all samples under ``root``, paired lexicographically by id."""
    left_dir = os.path.join(root, "left")
    ids = sorted(os.path.splitext(f)[0] for f in os.listdir(left_dir) if f.endswith(".png"))
    samples = []
    for sid in ids:
        sample = load_kitti_sample(
            os.path.join(root, "left", sid + ".png"),
            os.path.join(root, "right", sid + ".png"),
            os.path.join(root, "disp", sid + ".png"),
            sample_id=sid,
        )
        next_left = os.path.join(root, "next", "left", sid + ".png")
        if os.path.exists(next_left):
            nl = _read_image(next_left)
            nr = _read_image(os.path.join(root, "next", "right", sid + ".png"))
            dummy = DisparityMap(np.zeros(nl.shape[1:]), np.ones(nl.shape[1:], dtype=bool))
            sample.next_frame = StereoSample(nl, nr, dummy, id=sid + "_next")
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# reports


def save_report(reports, path):
    """Write EvalReports to CSV (deterministic: input order preserved)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_HEADER)
        for r in reports:
            writer.writerow(
                [
                    r.condition,
                    r.model,
                    r.method,
                    repr(r.epsilon),
                    r.target,
                    repr(r.d1_all),
                    repr(r.epe),
                    repr(r.l1_left),
                    repr(r.l1_right),
                    repr(r.linf_left),
                    repr(r.linf_right),
                ]
            )


def load_report(path):
    """Parse a report CSV back into EvalReports."""
    reports = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != REPORT_HEADER:
            raise ValueError("unexpected report header: {}".format(header))
        for row in reader:
            reports.append(
                EvalReport(
                    condition=row[0],
                    model=row[1],
                    method=row[2],
                    epsilon=float(row[3]),
                    target=row[4],
                    d1_all=float(row[5]),
                    epe=float(row[6]),
                    l1_left=float(row[7]),
                    l1_right=float(row[8]),
                    linf_left=float(row[9]),
                    linf_right=float(row[10]),
                )
            )
    return reports
