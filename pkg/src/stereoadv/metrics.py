"""Disparity evaluation metrics: D1-all, end-point error, perturbation norms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# KITTI D1-all thresholds: a pixel is erroneous when its disparity error
# exceeds both 3 px and 5% of the ground-truth disparity.
D1_ABS_THRESHOLD = 3.0
D1_REL_THRESHOLD = 0.05

__all__ = [
    "DisparityMap",
    "EvalReport",
    "d1_all",
    "epe",
    "perturbation_stats",
    "D1_ABS_THRESHOLD",
    "D1_REL_THRESHOLD",
]


@dataclass
class DisparityMap:
    """Per-pixel disparity values plus a validity mask."""

    values: np.ndarray  # [H, W] float64, pixels
    valid: np.ndarray  # [H, W] bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValueError(
                "values shape {} != valid shape {}".format(
                    self.values.shape, self.valid.shape
                )
            )

    @classmethod
    def from_prediction(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @property
    def shape(self):
        return self.values.shape


@dataclass
class EvalReport:
    """Metrics for one experimental condition."""

    condition: str
    model: str = ""
    method: str = ""
    epsilon: float = 0.0
    target: str = "both"
    d1_all: float = 0.0
    epe: float = 0.0
    l1_left: float = 0.0
    l1_right: float = 0.0
    linf_left: float = 0.0
    linf_right: float = 0.0
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not (0.0 <= self.d1_all <= 100.0):
            raise ValueError("d1_all must lie in [0, 100], got {}".format(self.d1_all))


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(
            "prediction shape {} != ground-truth shape {}".format(pred.shape, gt.shape)
        )
    if not gt.valid.any():
        raise ValueError("ground truth has no valid pixels")


def d1_all(pred: DisparityMap, gt: DisparityMap) -> float:
    """Percentage of valid pixels whose error exceeds 3 px and 5% of gt."""
    _check_pair(pred, gt)
    delta = np.abs(pred.values - gt.values)
    # delta > 0.05 * gt avoids a division and handles gt == 0 safely.
    bad = (delta > D1_ABS_THRESHOLD) & (delta > D1_REL_THRESHOLD * gt.values)
    valid = gt.valid
    return 100.0 * float(np.count_nonzero(bad & valid)) / float(np.count_nonzero(valid))


def epe(pred: DisparityMap, gt: DisparityMap) -> float:
    """Mean absolute disparity error over valid pixels."""
    _check_pair(pred, gt)
    delta = np.abs(pred.values - gt.values)
    return float(delta[gt.valid].mean())


def perturbation_stats(perturbation):
    """Per-side (mean |v|, max |v|) of a perturbation.

    Returns ((l1_left, linf_left), (l1_right, linf_right)).
    """
    stats = []
    for v in (perturbation.v_left, perturbation.v_right):
        a = np.abs(np.asarray(v, dtype=np.float64))
        stats.append((float(a.mean()), float(a.max())))
    return tuple(stats)
