"""Operator entry point: the three-phase pipeline, demos and evaluation.

Commands
--------
train-user      phase 1: train the ensemble pointing controller
train-analyst   phase 2: train the experiment-design policy
evaluate        fits, error curves, histograms, behaviour curves
demo            the non-myopic and adaptivity validation tasks

Every command is reproducible from (config file, seed); the effective
config is archived next to the outputs. Exit codes: 0 success, 2 config
error, 3 checkpoint error, 4 training failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analyst as analyst_mod
from . import demos, evaluation
from . import user_model as um
from .config import ConfigError, RunConfig, load_config, save_config
from .policies import load_policy, save_policy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_TRAINING = 4


class CheckpointError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_cli_overrides(
        study=getattr(args, "study", None),
        profile=getattr(args, "profile", None),
        seed=getattr(args, "seed", None),
        workers=getattr(args, "workers", None),
        random_designs=True if getattr(args, "random_designs", False) else None,
        mask_outcomes=True if getattr(args, "mask_outcomes", False) else None,
    )


def _prepare_out(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.yaml", cfg)
    return out


def _progress(label):
    def cb(iteration, row):
        print(
            f"[{label}] iter {iteration} steps {row['steps']} "
            f"reward {row['mean_ep_reward']:.4f} loss {row['policy_loss']:.4f}",
            flush=True,
        )

    return cb


def cmd_train_user(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    study_cfg = cfg.study_config()
    policy, result = um.train_ensemble(
        study_cfg,
        cfg.user_ppo_config(),
        seed=cfg.seed,
        metrics_path=out / "user_training.csv",
        progress=_progress("user") if args.verbose else None,
    )
    ckpt = out / "user_model.ckpt"
    save_policy(ckpt, policy, extra_meta={"kind": "user", "study_config": study_cfg.to_dict()})
    if result.diverged:
        raise TrainingError("user-model training diverged; last good weights saved")
    print(f"user checkpoint: {ckpt} (mean episode reward {result.mean_reward:.4f})")
    return EXIT_OK


def cmd_train_analyst(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    user_policy, extra = _load_user(args.user_checkpoint)
    study_cfg = um.StudyConfig.from_dict(extra["study_config"])
    policy, result = analyst_mod.train_analyst(
        user_policy,
        study_cfg,
        cfg.analyst_ppo_config(),
        seed=cfg.seed,
        random_designs=cfg.random_designs,
        mask_outcomes=cfg.mask_outcomes,
        metrics_path=out / "analyst_training.csv",
        progress=_progress("analyst") if args.verbose else None,
    )
    ckpt = out / ("analyst_random.ckpt" if cfg.random_designs else "analyst.ckpt")
    save_policy(
        ckpt,
        policy,
        extra_meta={
            "kind": "analyst",
            "study_config": study_cfg.to_dict(),
            "random_designs": cfg.random_designs,
            "mask_outcomes": cfg.mask_outcomes,
        },
    )
    if result.diverged:
        raise TrainingError("analyst training diverged; last good weights saved")
    print(f"analyst checkpoint: {ckpt} (mean episode reward {result.mean_reward:.4f})")
    return EXIT_OK


def _load_user(path):
    policy, extra = _load_policy_checked(path)
    if extra.get("kind") != "user":
        raise CheckpointError(f"{path} is not a user-model checkpoint")
    return policy, extra


def _load_analyst(path):
    policy, extra = _load_policy_checked(path)
    if extra.get("kind") != "analyst":
        raise CheckpointError(f"{path} is not an analyst checkpoint")
    return policy, extra


def _load_policy_checked(path):
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    try:
        return load_policy(p)
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot load checkpoint {p}: {exc}") from exc


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    user_policy, uextra = _load_user(args.user_checkpoint)
    study_cfg = um.StudyConfig.from_dict(uextra["study_config"])
    analyst_policy, _ = _load_analyst(args.analyst_checkpoint)
    n_eval = cfg.n_eval_episodes()

    episodes = evaluation.run_eval_episodes(
        user_policy, study_cfg, analyst_policy, n_eval, seed=cfg.seed + 1000
    )
    curves = [evaluation.error_curve_from_episodes(episodes, "optimised")]
    fits = evaluation.regression_table(episodes, study_cfg)
    designs = [d for ep in episodes for d in ep.designs]
    hist = evaluation.design_histogram(designs, study_cfg)

    if args.random_analyst_checkpoint:
        rnd_policy, _ = _load_analyst(args.random_analyst_checkpoint)
        rnd_episodes = evaluation.run_eval_episodes(
            user_policy, study_cfg, rnd_policy, n_eval, seed=cfg.seed + 1000, random_designs=True
        )
        curves.append(evaluation.error_curve_from_episodes(rnd_episodes, "random"))

    evaluation.write_table(out / "regression_fits.csv", evaluation.fit_rows(fits))
    curve_rows = [row for c in curves for row in evaluation.curve_rows(c)]
    evaluation.write_table(out / "error_curves.csv", curve_rows)
    evaluation.write_plot_description(
        out / "error_curves.json",
        f"study {study_cfg.study} estimation error",
        "experiments",
        "normalised L1 error",
        [evaluation.curve_series(c) for c in curves],
    )
    hist_rows = [
        {"dimension": dim, "bin_lo": lo, "bin_hi": hi, "count": count}
        for dim, data in hist.items()
        for lo, hi, count in zip(data["edges"][:-1], data["edges"][1:], data["counts"])
    ]
    evaluation.write_table(out / "design_histograms.csv", hist_rows)

    grids = {name: np.linspace(*study_cfg.prior[name], 5) for name in study_cfg.estimated}
    behaviour_rows = []
    for name, grid in grids.items():
        behaviour_rows.extend(
            evaluation.behaviour_curves(
                user_policy,
                study_cfg,
                name,
                [float(v) for v in grid],
                n_episodes=cfg.behaviour_episodes,
                seed=cfg.seed + 2000,
                workers=cfg.workers,
            )
        )
    evaluation.write_table(out / "behaviour_curves.csv", behaviour_rows)
    print(f"evaluation tables written to {out}")
    for name, fit in fits.items():
        print(f"  {name}: slope {fit.slope:.3f} intercept {fit.intercept:.3f} R^2 {fit.r_squared:.3f}")
    return EXIT_OK


def cmd_demo(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    budget = demos.DemoBudget.for_profile(cfg.profile)
    metrics = demos.run_demo(
        args.which,
        budget,
        seed=cfg.seed,
        out_dir=out,
        progress=_progress(args.which) if args.verbose else None,
    )
    for key, value in metrics.items():
        print(f"{key}: {value:.4f}" if isinstance(value, float) else f"{key}: {value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, default=None, help="YAML run config")
        p.add_argument("--study", type=int, choices=(1, 2, 3), default=None)
        p.add_argument("--profile", choices=("paper", "desk"), default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", type=Path, required=out_required, help="output directory")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("train-user", help="phase 1: train the ensemble user model")
    common(p)
    p.set_defaults(func=cmd_train_user)

    p = sub.add_parser("train-analyst", help="phase 2: train the analyst")
    common(p)
    p.add_argument("--user-checkpoint", type=Path, required=True)
    p.add_argument("--random-designs", action="store_true", help="train the estimation head on uniform designs")
    p.add_argument("--mask-outcomes", action="store_true", help="hide outcomes until the final step")
    p.set_defaults(func=cmd_train_analyst)

    p = sub.add_parser("evaluate", help="fits, curves and histograms from checkpoints")
    common(p)
    p.add_argument("--user-checkpoint", type=Path, required=True)
    p.add_argument("--analyst-checkpoint", type=Path, required=True)
    p.add_argument("--random-analyst-checkpoint", type=Path, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("demo", help="abstract validation tasks")
    p.add_argument("which", choices=("nonmyopic", "adaptivity"))
    common(p)
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
