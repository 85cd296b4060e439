"""Command-line front end for the stereo perturbation laboratory.

Subcommands: gen-data, train, attack, evaluate, transfer, defend, blur,
noise. Unspecified attack flags fall back to the standard defaults
(N = 40, beta = 0.47, resize ranges [0.9, 1.0], p = 0.5, and the
epsilon-dependent step-size schedule).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import attacks, data_io, defenses, harness, models
from .attacks import AttackConfig
from .defenses import FinetuneConfig

_TARGETS = {"both": "both", "left": "left_only", "right": "right_only"}
_ARCHES = {"corr": "correlation", "stack": "stacking"}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="stereoadv",
        description="Train miniature stereo networks, craft bounded "
        "perturbations, and evaluate robustness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a random-dot-stereogram dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--max-disparity", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a stereo network")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--arch", choices=sorted(_ARCHES), required=True)
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-channels", type=int, default=16)
    p.add_argument("--feature-layers", type=int, default=3)
    p.add_argument("--aggregation-layers", type=int, default=3)
    p.add_argument("--max-disparity", type=int, default=32)

    p = sub.add_parser("attack", help="craft perturbations and evaluate them")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=sorted(attacks.GRADIENT_METHODS), required=True)
    p.add_argument("--eps", type=float, default=0.02)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--prob", type=float, default=None)
    p.add_argument("--target", choices=sorted(_TARGETS), default="both")
    p.add_argument("--out-dir", default=None, help="directory for .spgn files")
    p.add_argument("--report", default=None, help="CSV report path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count())

    p = sub.add_parser("evaluate", help="evaluate a model, optionally on saved perturbations")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--perturb-dir", default=None)
    p.add_argument("--report", required=True)
    p.add_argument("--threads", type=int, default=os.cpu_count())

    p = sub.add_parser("transfer", help="cross-model transferability matrix")
    p.add_argument("--models", required=True, help="comma-separated model files")
    p.add_argument("--method", choices=sorted(attacks.GRADIENT_METHODS), required=True)
    p.add_argument("--eps", type=float, default=0.02)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count())

    p = sub.add_parser("defend", help="adversarial fine-tuning with FGSM")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eps", type=float, default=0.02)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--clean-fraction", type=float, default=0.5)
    p.add_argument("--out", required=True, help="fine-tuned model file")
    p.add_argument("--report", default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("blur", help="Gaussian-blur defense evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--perturb-dir", default=None)
    p.add_argument("--report", required=True)

    p = sub.add_parser("noise", help="random-noise baseline evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dist", choices=["gaussian", "uniform"], required=True)
    p.add_argument("--eps", type=float, default=0.02)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)

    return parser


def _load_perturb_dir(path, expected):
    files = sorted(f for f in os.listdir(path) if f.endswith(".spgn"))
    if len(files) != expected:
        raise ValueError(
            "perturbation directory has {} files for {} samples".format(
                len(files), expected
            )
        )
    return [attacks.load_perturbation(os.path.join(path, f)) for f in files]


def _cmd_gen_data(args):
    samples = data_io.generate_dataset(
        args.count,
        height=args.height,
        width=args.width,
        max_disparity=args.max_disparity,
        seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    for s in samples:
        data_io.save_sample(s, args.out)
    print("wrote {} samples to {}".format(len(samples), args.out))


def _cmd_train(args):
    dataset = data_io.load_dataset(args.data)
    spec = models.ArchitectureSpec(
        family=_ARCHES[args.arch],
        feature_channels=args.feature_channels,
        num_feature_layers=args.feature_layers,
        num_aggregation_layers=args.aggregation_layers,
        max_disparity=args.max_disparity,
    )
    params = models.init_params(spec, seed=args.seed)
    params = models.train(params, dataset, args.epochs, args.lr, seed=args.seed)
    models.save_params(params, args.out)
    final = params.loss_history[-1] if params.loss_history else float("nan")
    print("trained {} for {} epochs, final loss {:.6f} -> {}".format(
        args.arch, args.epochs, final, args.out))


def _attack_config(args):
    if args.method == "fgsm":
        for flag in ("steps", "alpha", "beta", "prob"):
            if getattr(args, flag) is not None:
                raise ValueError(
                    "--{} is meaningless for the single-step fgsm method".format(flag)
                )
        return AttackConfig(
            method="fgsm", epsilon=args.eps, alpha=args.eps, steps=1,
            target=_TARGETS[args.target], seed=args.seed,
        )
    if args.method in ("ifgsm", "di2fgsm") and args.beta is not None:
        raise ValueError("--beta applies only to momentum methods")
    if args.method in ("ifgsm", "mifgsm") and args.prob is not None:
        raise ValueError("--prob applies only to diverse-inputs methods")
    kw = {}
    if args.steps is not None:
        kw["steps"] = args.steps
    if args.alpha is not None:
        kw["alpha"] = args.alpha
    if args.beta is not None:
        kw["momentum_beta"] = args.beta
    if args.prob is not None:
        kw["transform_prob"] = args.prob
    return AttackConfig(
        method=args.method, epsilon=args.eps, target=_TARGETS[args.target],
        seed=args.seed, **kw,
    )


def _cmd_attack(args):
    params = models.load_params(args.model)
    dataset = data_io.load_dataset(args.data)
    cfg = _attack_config(args)
    perturbations = harness.craft_for_dataset(params, dataset, cfg)
    name = os.path.splitext(os.path.basename(args.model))[0]
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        for i, p in enumerate(perturbations):
            fname = "{}__{}__{:g}__{:04d}.spgn".format(name, cfg.method, cfg.epsilon, i)
            attacks.save_perturbation(p, os.path.join(args.out_dir, fname))
    clean = harness.evaluate_model(params, dataset, condition="clean", model_name=name)
    attacked = harness.evaluate_model(
        params, dataset, perturbations, condition="attacked", model_name=name,
        method=cfg.method, epsilon=cfg.epsilon, target=cfg.target,
    )
    if args.report:
        data_io.save_report([clean, attacked], args.report)
    print("clean D1-all {:.2f}% | {} eps={:g} D1-all {:.2f}%".format(
        clean.d1_all, cfg.method, cfg.epsilon, attacked.d1_all))


def _cmd_evaluate(args):
    params = models.load_params(args.model)
    dataset = data_io.load_dataset(args.data)
    name = os.path.splitext(os.path.basename(args.model))[0]
    reports = [harness.evaluate_model(params, dataset, condition="clean", model_name=name)]
    if args.perturb_dir:
        perturbations = _load_perturb_dir(args.perturb_dir, len(dataset))
        reports.append(
            harness.evaluate_model(
                params, dataset, perturbations, condition="attacked", model_name=name,
                method=perturbations[0].method, epsilon=perturbations[0].epsilon,
                target=perturbations[0].target,
            )
        )
    data_io.save_report(reports, args.report)
    for r in reports:
        print("{}: D1-all {:.2f}% EPE {:.3f}".format(r.condition, r.d1_all, r.epe))


def _cmd_transfer(args):
    paths = [p for p in args.models.split(",") if p]
    if len(paths) < 2:
        raise ValueError("--models needs at least two comma-separated model files")
    dataset = data_io.load_dataset(args.data)
    matrix = harness.transfer_matrix(
        paths, args.method, args.eps, dataset, seed=args.seed
    )
    names = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    harness.save_matrix_csv(matrix, names, args.report)
    print("transfer matrix ({} x {}) -> {}".format(len(paths), len(paths), args.report))


def _cmd_defend(args):
    params = models.load_params(args.model)
    dataset = data_io.load_dataset(args.data)
    cfg = FinetuneConfig(
        attack=AttackConfig(method="fgsm", epsilon=args.eps, alpha=args.eps, steps=1),
        epochs=args.epochs,
        learning_rate=args.lr,
        clean_fraction=args.clean_fraction,
        seed=args.seed,
    )
    tuned = defenses.adversarial_finetune(params, dataset, cfg)
    models.save_params(tuned, args.out)
    name = os.path.splitext(os.path.basename(args.out))[0]
    clean = harness.evaluate_model(tuned, dataset, condition="clean", model_name=name)
    atk_cfg = AttackConfig(method="fgsm", epsilon=args.eps, alpha=args.eps, steps=1,
                           seed=args.seed)
    perturbations = harness.craft_for_dataset(tuned, dataset, atk_cfg)
    attacked = harness.evaluate_model(
        tuned, dataset, perturbations, condition="attacked", model_name=name,
        method="fgsm", epsilon=args.eps,
    )
    if args.report:
        data_io.save_report([clean, attacked], args.report)
    print("fine-tuned: clean D1-all {:.2f}% | fresh fgsm eps={:g} D1-all {:.2f}%".format(
        clean.d1_all, args.eps, attacked.d1_all))


def _cmd_blur(args):
    params = models.load_params(args.model)
    dataset = data_io.load_dataset(args.data)
    name = os.path.splitext(os.path.basename(args.model))[0]
    if args.perturb_dir:
        perturbations = _load_perturb_dir(args.perturb_dir, len(dataset))
        rep_clean, rep_attacked = defenses.blur_defense_eval(
            params, dataset, perturbations, args.sigma
        )
        rep_clean.model = rep_attacked.model = name
        reports = [rep_clean, rep_attacked]
    else:
        blurred = [defenses._blurred(s, args.sigma) for s in dataset]
        reports = [
            harness.evaluate_model(params, blurred, condition="blurred_clean",
                                   model_name=name)
        ]
    data_io.save_report(reports, args.report)
    for r in reports:
        print("{} (sigma={:g}): D1-all {:.2f}%".format(r.condition, args.sigma, r.d1_all))


def _cmd_noise(args):
    params = models.load_params(args.model)
    dataset = data_io.load_dataset(args.data)
    name = os.path.splitext(os.path.basename(args.model))[0]
    method = args.dist + "_noise"
    cfg = AttackConfig(method=method, epsilon=args.eps, alpha=args.eps, seed=args.seed)
    perturbations = harness.craft_for_dataset(params, dataset, cfg)
    rep = harness.evaluate_model(
        params, dataset, perturbations, condition="noise", model_name=name,
        method=method, epsilon=args.eps,
    )
    data_io.save_report([rep], args.report)
    print("{} eps={:g}: D1-all {:.2f}%".format(method, args.eps, rep.d1_all))


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "attack": _cmd_attack,
    "evaluate": _cmd_evaluate,
    "transfer": _cmd_transfer,
    "defend": _cmd_defend,
    "blur": _cmd_blur,
    "noise": _cmd_noise,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - single-line diagnostic contract
        print("error: {}".format(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
