"""Command-line entry point: ``crowdpatch <subcommand> ...``.

Exit status: 0 on success, 1 when the input is invalid (bad flags, config or
file format), 2 when a pipeline stage fails while running.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bounds, io
from .attack import (AttackConfig, apply_patch, load_patch, random_patch, run_blackbox_attack,
                     run_whitebox_attack, save_patch, upright)
from .bench import ConfigError, StageError, error_rate, load_config, mae_rmse, run_experiment
from .defense import (adversarial_train, certificate_retrain, load_defended, retention_k,
                      save_defended, SIDECAR_SUFFIX)
from .models import ModelSpec, TrainConfig, build_model, load_model, predict_density, save_model, train
from .scenes import make_dataset, split_indices

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _split(data: Path, name: str):
    scenes = io.read_dataset(data)
    return [scenes[i] for i in split_indices(len(scenes))[name]]


def _attack_cfg(a, seed: int) -> AttackConfig:
    return AttackConfig(target_factor=a.target_factor, gamma=a.gamma, step=a.step,
                        iterations=a.iterations, side=a.side, seed=seed)


def _load_any(path):
    return load_defended(path) if Path(str(path) + SIDECAR_SUFFIX).exists() else load_model(path)


def cmd_gen_data(a):
    scenes = make_dataset(a.seed, a.n, a.size, a.size, (a.count_min, a.count_max), a.style, a.sigma)
    io.write_dataset(a.out, scenes, {"seed": a.seed, "size": a.size, "style": a.style,
                                     "count_range": f"{a.count_min},{a.count_max}",
                                     "sigma": a.sigma, "split": "80/10/10"})
    print(f"wrote {len(scenes)} scenes to {a.out}")


def cmd_train(a):
    scenes = _split(a.data, "train")
    cfg = TrainConfig(lr=a.lr, epochs=a.epochs, seed=a.seed, optimizer=a.optimizer)
    model, trace = train(build_model(ModelSpec(a.arch, a.seed)), scenes, cfg)
    save_model(a.out, model)
    print(f"final loss {trace[-1]:.6g}; saved {a.out}")


def cmd_attack(a):
    scenes = _split(a.data, a.split)
    cfg = _attack_cfg(a, a.seed)
    if a.mode == "black":
        if not a.substitute:
            raise ValueError("black-box mode needs at least one --substitute")
        subs = [load_model(p) for p in a.substitute]
        pool = scenes[: a.images]
        patch, trace = run_blackbox_attack(subs, [s.image for s in pool],
                                           [s.density for s in pool], cfg, return_trace=True)
    elif a.mode == "random":
        patch, trace = random_patch(cfg, scenes[0].image.shape[-2:], scenes[0].image.shape[0]), None
    else:
        if a.model is None:
            raise ValueError("white-box mode needs --model")
        if not 0 <= a.index < len(scenes):
            raise ValueError(f"--index {a.index} outside the {a.split} split of {len(scenes)} scenes")
        target = _load_any(a.model)
        victim = target.attack_view(seed=a.seed) if hasattr(target, "attack_view") else target
        scene = scenes[a.index]
        patch, _, trace = run_whitebox_attack(victim, scene.image, scene.density, cfg)
    save_patch(a.out, patch)
    if trace is not None and a.trace:
        trace.write_csv(a.trace)
    print(f"saved patch {a.out}")


def cmd_defend(a):
    scenes = _split(a.data, "train")
    spec = ModelSpec(a.arch, a.seed)
    cfg = TrainConfig(lr=a.lr, epochs=a.epochs, seed=a.seed)
    if a.method == "ablation":
        h, w = scenes[0].image.shape[-2:]
        k = a.k if a.k is not None else retention_k(a.k_fraction, h, w)
        save_defended(a.out, certificate_retrain(spec, scenes, k, cfg, a.rounds))
    else:
        inner = AttackConfig(side=a.side, iterations=a.inner_iterations, placement="random", seed=a.seed)
        warm = a.warmup if a.warmup is not None else a.epochs // 4
        ramp = a.ramp if a.ramp is not None else a.epochs // 4
        model, _ = adversarial_train(spec, scenes, cfg, inner, warm, ramp)
        save_model(a.out, model)
    print(f"saved defended model {a.out}")


def cmd_certify(a):
    rows = bounds.bound_rows(a.d, a.k, a.n)
    if a.out:
        bounds.write_bound_csv(a.out, rows)
    else:
        bounds.write_bound_csv(sys.stdout, rows)


def cmd_eval(a):
    scenes = _split(a.data, a.split)[: a.images]
    target = _load_any(a.model)
    defended = hasattr(target, "predict")
    if defended and a.seed is None:
        raise ValueError("--seed is required when evaluating a defended model")
    patch = load_patch(a.patch) if a.patch else None

    def count(img, i):
        if defended:
            return float(target.predict(img, seed=[a.seed, i]).sum())
        return float(predict_density(target, img).sum())

    gt = [s.count for s in scenes]
    clean = [count(s.image, i) for i, s in enumerate(scenes)]
    if patch is None:
        pred = clean
    else:
        pred = [count(apply_patch(s.image, upright(patch, s.image.shape[-2:])), i)
                for i, s in enumerate(scenes)]
    mae, rmse = mae_rmse(gt, pred)
    pis = [error_rate(y, t) for y, t in zip(clean, pred) if y != 0]
    print(f"images={len(scenes)} mae={mae:.6g} rmse={rmse:.6g} mean_pi={np.mean(pis) if pis else float('nan'):.6g}")


def cmd_report(a):
    cfg = load_config(a.config)
    if a.out:
        cfg = replace(cfg, out=a.out)
    report = run_experiment(cfg)
    print(f"wrote {Path(cfg.out) / 'report.csv'} ({len(report.rows)} rows, config {report.config_hash})")


def _attack_flags(p):
    p.add_argument("--side", type=int, default=14)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--step", type=float, default=0.03)
    p.add_argument("--gamma", type=float, default=0.01)
    p.add_argument("--target-factor", type=float, default=10.0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="crowdpatch", description="Patch attacks and ablation defenses for toy crowd counters.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count-min", type=int, default=3)
    p.add_argument("--count-max", type=int, default=15)
    p.add_argument("--style", choices=["uniform", "clustered", "mixed"], default="mixed")
    p.add_argument("--sigma", type=float, default=4.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a density model on the training split")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--arch", choices=["multi_column", "dilated", "context"], required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=["adam", "sgd_momentum"], default="adam")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="optimize a patch")
    p.add_argument("--mode", choices=["white", "black", "random"], required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--index", type=int, default=0, help="image to attack (white mode)")
    p.add_argument("--images", type=int, default=32, help="images the universal patch is fitted on (black mode)")
    p.add_argument("--model", help="victim checkpoint (white mode)")
    p.add_argument("--substitute", action="append", default=[], help="substitute checkpoint (black mode, repeatable)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="write the per-iteration trace CSV here")
    _attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="train a defended model")
    p.add_argument("--method", choices=["ablation", "advtrain"], required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--arch", choices=["multi_column", "dilated", "context"], required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--k", type=int)
    p.add_argument("--k-fraction", type=float, default=0.012)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--side", type=int, default=14)
    p.add_argument("--inner-iterations", type=int, default=10)
    p.add_argument("--warmup", type=int)
    p.add_argument("--ramp", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("certify", help="bound table as CSV (n,k,d,upper,log10_lower)")
    p.add_argument("--d", type=int, default=bounds.REFERENCE_D)
    p.add_argument("--k", type=int, default=bounds.REFERENCE_K)
    p.add_argument("--n", type=int, nargs="+", default=[s * s for s in bounds.REFERENCE_SIDES])
    p.add_argument("--out")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("eval", help="MAE/RMSE/error rate of a model, optionally under a patch")
    p.add_argument("--model", required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--images", type=int, default=50)
    p.add_argument("--patch")
    p.add_argument("--seed", type=int, help="required for defended models")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="run a full experiment config and write report.csv")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the config's output directory")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED
    except (ConfigError, io.FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # anything else broke while running
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
