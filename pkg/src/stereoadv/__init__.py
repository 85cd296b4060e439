"""Desk-scale laboratory for adversarial perturbations of stereo networks."""

from .autodiff import Tape, Tensor, backward
from .attacks import AttackConfig, Perturbation
from .data_io import SceneSpec, StereoSample, generate_dataset, generate_rds
from .defenses import FinetuneConfig
from .metrics import DisparityMap, EvalReport, d1_all, epe, perturbation_stats
from .models import ArchitectureSpec, ModelParams, init_params

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "AttackConfig",
    "Perturbation",
    "SceneSpec",
    "StereoSample",
    "generate_dataset",
    "generate_rds",
    "FinetuneConfig",
    "DisparityMap",
    "EvalReport",
    "d1_all",
    "epe",
    "perturbation_stats",
    "ArchitectureSpec",
    "ModelParams",
    "init_params",
]
