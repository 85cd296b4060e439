"""Defenses: Gaussian-blur preprocessing and adversarial fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attacks, models
from . import autodiff as ad
from .attacks import AttackConfig
from .autodiff import Tape
from .data_io import StereoSample
from .metrics import EvalReport

__all__ = [
    "FinetuneConfig",
    "gaussian_blur",
    "blur_defense_eval",
    "adversarial_finetune",
]


@dataclass
class FinetuneConfig:
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(method="fgsm"))
    epochs: int = 20
    learning_rate: float = 0.001
    clean_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0.0 < self.clean_fraction <= 1.0):
            raise ValueError("clean_fraction must lie in (0, 1]")


def _blur_kernel(sigma):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ax = np.array([-1.0, 0.0, 1.0])
    dx2 = ax[None, :] ** 2 + ax[:, None] ** 2
    k = np.exp(-dx2 / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(image, sigma):
    """3x3 Gaussian blur per channel with reflect padding at the borders."""
    kernel = _blur_kernel(sigma)
    image = np.asarray(image, dtype=np.float64)
    padded = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    out = np.zeros_like(image)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * padded[:, di : di + image.shape[1], dj : dj + image.shape[2]]
    return out


def _blurred(sample: StereoSample, sigma) -> StereoSample:
    return StereoSample(
        np.clip(gaussian_blur(sample.left, sigma), 0.0, 1.0),
        np.clip(gaussian_blur(sample.right, sigma), 0.0, 1.0),
        sample.gt,
        id=sample.id,
    )


def blur_defense_eval(params, dataset, perturbations, sigma):
    """Evaluate D1-all on blurred-clean and blurred-attacked inputs.

    Returns an (EvalReport, EvalReport) pair.
    """
    from .harness import evaluate_model

    if len(perturbations) != len(dataset):
        raise ValueError(
            "{} perturbations for {} samples".format(len(perturbations), len(dataset))
        )
    clean_blurred = [_blurred(s, sigma) for s in dataset]
    attacked_blurred = [
        _blurred(attacks.apply(p, s), sigma) for p, s in zip(perturbations, dataset)
    ]
    rep_clean = evaluate_model(params, clean_blurred, condition="blurred_clean")
    rep_attacked = evaluate_model(params, attacked_blurred, condition="blurred_attacked")
    rep_clean.extra["sigma"] = sigma
    rep_attacked.extra["sigma"] = sigma
    return rep_clean, rep_attacked


def adversarial_finetune(params, dataset, cfg: FinetuneConfig):
    """Fine-tune on a mix of clean and freshly perturbed samples.

    Each epoch, each sample is replaced (with probability
    1 - clean_fraction) by its adversarially perturbed version crafted
    against the current parameters. Deterministic for fixed seeds.
    """
    if not dataset:
        raise ValueError("fine-tuning dataset is empty")
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity = [np.zeros_like(p.data) for p in params.parameters()]
    plist = list(params.parameters())
    momentum = 0.9

    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for idx in order:
            sample = dataset[idx]
            if rng.uniform() >= cfg.clean_fraction:
                atk_cfg = AttackConfig(
                    method=cfg.attack.method,
                    epsilon=cfg.attack.epsilon,
                    alpha=cfg.attack.alpha,
                    steps=cfg.attack.steps,
                    momentum_beta=cfg.attack.momentum_beta,
                    target=cfg.attack.target,
                    seed=int(rng.integers(0, 2**31)),
                )
                perturbation = attacks.craft(params, sample, atk_cfg)
                sample = attacks.apply(perturbation, sample)
            params.set_requires_grad(True)
            params.zero_grad()
            with Tape():
                pred = models.forward(params, sample.left, sample.right)
                sample_loss = models.loss(pred, sample.gt)
            value = sample_loss.data.item()
            if not np.isfinite(value):
                raise FloatingPointError("non-finite loss during fine-tuning")
            ad.backward(sample_loss)
            for p, v in zip(plist, velocity):
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                norm = np.sqrt((g * g).sum())
                if norm > models.GRAD_CLIP:
                    g = g * (models.GRAD_CLIP / norm)
                v *= momentum
                v += g
                p.data -= cfg.learning_rate * v
            epoch_loss += value
        params.loss_history.append(epoch_loss / len(dataset))

    params.set_requires_grad(False)
    params.zero_grad()
    return params
