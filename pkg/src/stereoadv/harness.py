"""Experiment orchestration: attack sweeps, transfer matrices, next-frame runs."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import attacks, models
from .attacks import AttackConfig, Perturbation
from .data_io import StereoSample, load_dataset, save_report
from .metrics import EvalReport, d1_all, epe, perturbation_stats

DEFAULT_EPSILONS = (0.002, 0.005, 0.01, 0.02)

__all__ = [
    "SweepSpec",
    "attack_sweep",
    "transfer_matrix",
    "next_frame_transfer",
    "evaluate_model",
    "sample_seed",
    "DEFAULT_EPSILONS",
]


@dataclass
class SweepSpec:
    models: list  # model file paths
    methods: list
    epsilons: list = field(default_factory=lambda: list(DEFAULT_EPSILONS))
    dataset_root: str = ""
    output_dir: str = ""
    seed: int = 0
    target: str = "both"
    steps: int = 40

    def __post_init__(self):
        if not self.models:
            raise ValueError("sweep needs at least one model")
        if not self.methods:
            raise ValueError("sweep needs at least one method")
        if not self.epsilons:
            raise ValueError("sweep needs at least one epsilon")


def sample_seed(global_seed, sample_index):
    """Per-sample RNG seed, independent of evaluation order."""
    return (int(global_seed) * 1000003 + int(sample_index)) % (2**63)


def evaluate_model(params, dataset, perturbations=None, condition="clean",
                   model_name="", method="", epsilon=0.0, target="both"):
    """Mean D1-all / EPE over a dataset, optionally with perturbations applied."""
    if perturbations is not None and len(perturbations) != len(dataset):
        raise ValueError(
            "{} perturbations for {} samples".format(len(perturbations), len(dataset))
        )
    d1s, epes = [], []
    l1l = l1r = linfl = linfr = 0.0
    for i, sample in enumerate(dataset):
        if perturbations is not None:
            p = perturbations[i]
            sample = attacks.apply(p, sample)
            (al1, alinf), (bl1, blinf) = perturbation_stats(p)
            l1l += al1
            l1r += bl1
            linfl = max(linfl, alinf)
            linfr = max(linfr, blinf)
        pred = models.predict(params, sample)
        d1s.append(d1_all(pred, sample.gt))
        epes.append(epe(pred, sample.gt))
    n = len(dataset)
    return EvalReport(
        condition=condition,
        model=model_name,
        method=method,
        epsilon=epsilon,
        target=target,
        d1_all=float(np.mean(d1s)),
        epe=float(np.mean(epes)),
        l1_left=l1l / n if perturbations is not None else 0.0,
        l1_right=l1r / n if perturbations is not None else 0.0,
        linf_left=linfl,
        linf_right=linfr,
    )


def craft_for_dataset(params, dataset, cfg: AttackConfig):
    """One perturbation per sample, seeded by (cfg.seed, sample index)."""
    out = []
    for i, sample in enumerate(dataset):
        per_cfg = AttackConfig(
            method=cfg.method,
            epsilon=cfg.epsilon,
            alpha=cfg.alpha,
            steps=cfg.steps,
            momentum_beta=cfg.momentum_beta,
            resize_h_range=cfg.resize_h_range,
            resize_w_range=cfg.resize_w_range,
            transform_prob=cfg.transform_prob,
            target=cfg.target,
            seed=sample_seed(cfg.seed, i),
        )
        out.append(attacks.craft(params, sample, per_cfg))
    return out


def _model_name(path):
    return os.path.splitext(os.path.basename(str(path)))[0]


def attack_sweep(spec: SweepSpec, dataset=None):
    """Run every (model, method, epsilon) cell; persist perturbations and CSV.

    A failing cell is recorded as a report with condition "failed:<reason>"
    and does not abort the remaining cells.
    """
    if dataset is None:
        dataset = load_dataset(spec.dataset_root)
    if spec.output_dir:
        os.makedirs(spec.output_dir, exist_ok=True)
    reports = []
    for model_path in spec.models:
        params = models.load_params(model_path)
        name = _model_name(model_path)
        clean = evaluate_model(params, dataset, condition="clean", model_name=name)
        reports.append(clean)
        for method in spec.methods:
            for eps in spec.epsilons:
                try:
                    cfg = AttackConfig(
                        method=method,
                        epsilon=eps,
                        steps=spec.steps,
                        target=spec.target,
                        seed=spec.seed,
                    )
                    perturbations = craft_for_dataset(params, dataset, cfg)
                    if spec.output_dir:
                        for i, p in enumerate(perturbations):
                            fname = "{}__{}__{:g}__{:04d}.spgn".format(name, method, eps, i)
                            attacks.save_perturbation(
                                p, os.path.join(spec.output_dir, fname)
                            )
                    rep = evaluate_model(
                        params,
                        dataset,
                        perturbations,
                        condition="attacked",
                        model_name=name,
                        method=method,
                        epsilon=eps,
                        target=spec.target,
                    )
                except Exception as exc:  # noqa: BLE001 - cell isolation
                    rep = EvalReport(
                        condition="failed:{}".format(exc),
                        model=name,
                        method=method,
                        epsilon=eps,
                        target=spec.target,
                    )
                reports.append(rep)
    if spec.output_dir:
        save_report(reports, os.path.join(spec.output_dir, "sweep.csv"))
    return reports


def transfer_matrix(model_paths, method, epsilon, dataset, seed=0, steps=40,
                    perturbation_sets=None):
    """D1-all matrix: entry (i, j) = model j on inputs perturbed for model i.

    Perturbations are crafted once per source model and reused for every
    target. Pass ``perturbation_sets`` to reuse previously saved ones.
    """
    if not model_paths:
        raise ValueError("transfer needs at least one model")
    loaded = [models.load_params(p) for p in model_paths]
    if perturbation_sets is None:
        perturbation_sets = []
        for i, params in enumerate(loaded):
            cfg = AttackConfig(method=method, epsilon=epsilon, steps=steps, seed=seed)
            perturbation_sets.append(craft_for_dataset(params, dataset, cfg))
    n = len(loaded)
    matrix = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            rep = evaluate_model(
                loaded[j],
                dataset,
                perturbation_sets[i],
                condition="transfer",
                model_name=_model_name(model_paths[j]),
                method=method,
                epsilon=epsilon,
            )
            matrix[i, j] = rep.d1_all
    return matrix


def next_frame_transfer(params, perturbation: Perturbation, next_sample: StereoSample,
                        model_name=""):
    """Apply a saved perturbation to a different (e.g. next-frame) sample."""
    if perturbation.v_left.shape != next_sample.left.shape:
        raise ValueError("perturbation shape does not match the target frame")
    perturbed = attacks.apply(perturbation, next_sample)
    return evaluate_model(
        params,
        [perturbed],
        condition="next_frame",
        model_name=model_name,
        method=perturbation.method,
        epsilon=perturbation.epsilon,
        target=perturbation.target,
    )


def save_matrix_csv(matrix, model_names, path):
    """Transfer matrix as CSV: rows = source model, columns = target model."""
    with open(path, "w", newline="") as f:
        f.write("source\\target," + ",".join(model_names) + "\n")
        for name, row in zip(model_names, np.asarray(matrix)):
            f.write(name + "," + ",".join(repr(float(x)) for x in row) + "\n")
