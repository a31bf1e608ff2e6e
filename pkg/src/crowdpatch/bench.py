"""Experiment orchestration: config files, count metrics and report tables.

A config is flat ``key = value`` text. Top-level keys come first; ``[model]``
and ``[defense]`` blocks may repeat. Example::

    seed = 1
    out = runs/demo
    patch_sides = 4, 7, 14

    [model]
    name = mc
    arch = multi_column
    seed = 0

    [defense]
    name = ablation
    method = ablation
    k_fraction = 0.012
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .attack import (AttackConfig, apply_patch, load_patch, run_blackbox_attack, run_whitebox_attack,
                     save_patch, upright)
from .defense import (DefendedModel, adversarial_train, certificate_retrain, load_defended,
                      retention_k, save_defended)
from .models import ModelSpec, TrainConfig, build_model, load_model, predict_density, save_model, train
from .scenes import make_dataset, split_indices

log = logging.getLogger(__name__)

REPORT_HEADER = ["model", "defense", "patch_side", "mae", "rmse", "mean_pi"]
LONG_HEADER = ["model", "defense", "patch_side", "image", "gt", "y", "y_adv", "pi"]
UNDEFINED = "undefined"


# ---------------------------------------------------------------- metrics

def mae_rmse(gt_counts: Sequence[float], pred_counts: Sequence[float]) -> tuple[float, float]:
    gt = np.asarray(gt_counts, float)
    pred = np.asarray(pred_counts, float)
    if gt.shape != pred.shape or gt.ndim != 1:
        raise ValueError(f"count vectors must be 1-D and equal length, got {gt.shape} and {pred.shape}")
    if gt.size == 0:
        raise ValueError("cannot score an empty set of counts")
    err = np.abs(gt - pred)
    top = err.max()
    if top == 0 or not np.isfinite(top):
        return float(np.mean(err)), float(top)
    # scaled so tiny or huge errors neither underflow nor overflow when squared
    return float(np.mean(err)), float(top * math.sqrt(np.mean((err / top) ** 2)))


class UndefinedErrorRate(ZeroDivisionError):
    pass


def error_rate(y: float, y_adv: float) -> float:
    """|(y - y_adv) / y| in percent; a zero clean count raises UndefinedErrorRate."""
    if y == 0:
        raise UndefinedErrorRate("error rate is undefined for a clean count of 0")
    return float(abs((y - y_adv) / y) * 100.0)


# ---------------------------------------------------------------- config

class ConfigError(ValueError):
    pass


@dataclass
class ModelEntry:
    name: str
    arch: str
    seed: int
    role: str = "victim"  # or "substitute"


@dataclass
class DefenseEntry:
    name: str
    method: str = "none"  # none | ablation | advtrain
    k_fraction: float = 0.012
    rounds: int = 10
    warmup: int = -1  # -1: a quarter of the epochs
    ramp: int = -1
    inner_iterations: int = 10


@dataclass
class ExperimentConfig:
    seed: int
    out: str
    size: int = 64
    n_scenes: int = 500
    count_min: int = 3
    count_max: int = 15
    style: str = "mixed"
    epochs: int = 60
    lr: float = 1e-3
    test_images: int = 20
    patch_sides: tuple[int, ...] = (4, 7, 14)
    attack_mode: str = "white"  # white | black
    attack_iterations: int = 100
    attack_step: float = 0.03
    target_factor: float = 10.0
    gamma: float = 0.01
    models: list[ModelEntry] = field(default_factory=list)
    defenses: list[DefenseEntry] = field(default_factory=list)

    def validate(self) -> None:
        sides = list(self.patch_sides)
        if any(b <= a for a, b in zip(sides, sides[1:])):
            raise ConfigError(f"patch_sides must be strictly increasing, got {sides}")
        if any(s != 0 and not 2 <= s <= self.size for s in sides):
            raise ConfigError(f"patch sides must be 0 (clean) or lie in [2, {self.size}]")
        if self.attack_mode not in ("white", "black"):
            raise ConfigError(f"attack_mode must be white or black, got {self.attack_mode!r}")
        if not self.victims:
            raise ConfigError("config declares no victim model")
        if self.attack_mode == "black" and not self.substitutes:
            raise ConfigError("black-box mode needs at least one substitute model")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError(f"model names must be unique, got {names}")
        dnames = [d.name for d in self.defenses]
        if len(set(dnames)) != len(dnames):
            raise ConfigError(f"defense names must be unique, got {dnames}")
        for m in self.models:
            if m.role not in ("victim", "substitute"):
                raise ConfigError(f"model {m.name}: role must be victim or substitute")
            try:
                ModelSpec(m.arch, m.seed).validate()
            except ValueError as e:
                raise ConfigError(f"model {m.name}: {e}") from None
        for d in self.defenses:
            if d.method not in ("none", "ablation", "advtrain"):
                raise ConfigError(f"defense {d.name}: unknown method {d.method!r}")
        if not 0 < self.test_images:
            raise ConfigError("test_images must be >= 1")

    @property
    def attack_sides(self) -> tuple[int, ...]:
        return tuple(s for s in self.patch_sides if s > 0)

    @property
    def victims(self) -> list[ModelEntry]:
        return [m for m in self.models if m.role == "victim"]

    @property
    def substitutes(self) -> list[ModelEntry]:
        return [m for m in self.models if m.role == "substitute"]

    def defense_list(self) -> list[DefenseEntry]:
        return self.defenses or [DefenseEntry("none")]

    def canonical_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name in ("models", "defenses", "out"):
                continue
            lines.append(f"{f.name}={_fmt(getattr(self, f.name))}")
        for m in self.models:
            lines.append("[model]")
            lines += [f"{f.name}={_fmt(getattr(m, f.name))}" for f in fields(m)]
        for d in self.defense_list():
            lines.append("[defense]")
            lines += [f"{f.name}={_fmt(getattr(d, f.name))}" for f in fields(d)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(cls, key: str, raw: str, where: str):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types or key in ("models", "defenses"):
        raise ConfigError(f"{where}: unknown key {key!r}")
    t = str(types[key])
    try:
        if t.startswith("tuple"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {key}={raw!r} as {t}") from None
    return raw


def parse_config(text: str) -> ExperimentConfig:
    top: dict = {}
    blocks: list[tuple[str, dict, int]] = []
    current = top
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            kind = line[1:-1].strip()
            if kind not in ("model", "defense"):
                raise ConfigError(f"line {lineno}: unknown section [{kind}]")
            current = {}
            blocks.append((kind, current, lineno))
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, val = key.strip(), val.strip()
        if key in current:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        current[key] = (val, lineno)
    for required in ("seed", "out"):
        if required not in top:
            raise ConfigError(f"missing top-level key {required!r}")
    kwargs = {k: _coerce(ExperimentConfig, k, v, f"line {n}") for k, (v, n) in top.items()}
    cfg = ExperimentConfig(**kwargs)
    for kind, body, lineno in blocks:
        cls = ModelEntry if kind == "model" else DefenseEntry
        vals = {k: _coerce(cls, k, v, f"line {n}") for k, (v, n) in body.items()}
        if kind == "model" and "seed" not in vals:
            raise ConfigError(f"line {lineno}: [model] needs an explicit seed")
        try:
            entry = cls(**vals)
        except TypeError as e:
            raise ConfigError(f"line {lineno}: incomplete [{kind}] block ({e})") from None
        (cfg.models if kind == "model" else cfg.defenses).append(entry)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------- pipeline

class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class ReportRow:
    model: str
    defense: str
    patch_side: int
    mae: float
    rmse: float
    mean_pi: float


@dataclass
class MetricsReport:
    rows: list[ReportRow]
    config_hash: str
    seeds: dict[str, int]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([r.model, r.defense, r.patch_side, repr(r.mae), repr(r.rmse), repr(r.mean_pi)])


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, typ, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _train_cfg(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(lr=cfg.lr, epochs=cfg.epochs, seed=seed)


def _attack_cfg(cfg: ExperimentConfig, side: int, seed: int) -> AttackConfig:
    return AttackConfig(target_factor=cfg.target_factor, gamma=cfg.gamma, step=cfg.attack_step,
                        iterations=cfg.attack_iterations, side=side, seed=seed)


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    """generate -> train -> defend -> attack/evaluate -> report, resuming from
    whatever artifacts already sit in ``cfg.out``."""
    cfg.validate()
    out = Path(cfg.out)
    for sub in ("models", "evals", "patches"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    with _Stage("generate"):
        data_dir = out / "data"
        if (data_dir / io.INDEX_NAME).exists():
            scenes = io.read_dataset(data_dir)
        else:
            scenes = make_dataset(cfg.seed, cfg.n_scenes, cfg.size, cfg.size,
                                  (cfg.count_min, cfg.count_max), cfg.style)
            io.write_dataset(data_dir, scenes, {"seed": cfg.seed, "size": cfg.size,
                                                "count_range": f"{cfg.count_min},{cfg.count_max}",
                                                "style": cfg.style, "split": "80/10/10"})
        split = split_indices(len(scenes))
        train_set = [scenes[i] for i in split["train"]]
        test_set = [scenes[i] for i in split["test"]][: cfg.test_images]
        if not test_set:
            raise ValueError("the test split is empty")

    models = {}
    with _Stage("train"):
        for m in cfg.models:
            path = out / "models" / f"{m.name}.pcm"
            if path.exists():
                models[m.name] = load_model(path)
            else:
                models[m.name], _ = train(build_model(ModelSpec(m.arch, m.seed)), train_set,
                                          _train_cfg(cfg, m.seed))
                save_model(path, models[m.name])

    defended: dict[tuple[str, str], object] = {}
    with _Stage("defend"):
        for m in cfg.victims:
            for d in cfg.defense_list():
                defended[m.name, d.name] = _defend(cfg, m, d, models[m.name], train_set, out)

    rows: list[ReportRow] = []
    long_rows: list[list] = []
    gt = np.array([s.count for s in test_set], float)
    universal = {}
    if cfg.attack_mode == "black":
        with _Stage("attack"):
            subs = [models[s.name] for s in cfg.substitutes]
            for side in cfg.attack_sides:
                path = out / "patches" / f"universal_s{side}.pcp"
                if path.exists():
                    universal[side] = load_patch(path)
                else:
                    universal[side] = run_blackbox_attack(
                        subs, [s.image for s in train_set], [s.density for s in train_set],
                        replace(_attack_cfg(cfg, side, cfg.seed), transform=True))
                    save_patch(path, universal[side])

    with _Stage("evaluate"):
        for m in cfg.victims:
            for d in cfg.defense_list():
                target = defended[m.name, d.name]
                clean = None
                for side in (0,) + cfg.attack_sides:
                    path = out / "evals" / f"{m.name}.{d.name}.s{side}.csv"
                    if path.exists():
                        y, y_adv = _read_eval(path)
                    else:
                        y, y_adv = _evaluate(cfg, target, test_set, side, clean, universal.get(side))
                        _write_eval(path, gt, y, y_adv)
                    if side == 0:
                        clean = y
                    mae, rmse = mae_rmse(gt, y_adv)
                    pis = []
                    for i, (a, b) in enumerate(zip(y, y_adv)):
                        try:
                            pi = error_rate(a, b)
                            pis.append(pi)
                        except UndefinedErrorRate:
                            pi = UNDEFINED
                        long_rows.append([m.name, d.name, side, i, repr(float(gt[i])), repr(float(a)),
                                          repr(float(b)), pi if pi == UNDEFINED else repr(pi)])
                    rows.append(ReportRow(m.name, d.name, side, mae, rmse,
                                          float(np.mean(pis)) if pis else float("nan")))

    report = MetricsReport(rows, cfg.config_hash(),
                           {"experiment": cfg.seed, **{m.name: m.seed for m in cfg.models}})
    report.write_csv(out / "report.csv")
    with open(out / "report_long.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_HEADER)
        w.writerows(long_rows)
    (out / "provenance.txt").write_text(
        f"config_hash={report.config_hash}\n"
        + "".join(f"seed.{k}={v}\n" for k, v in report.seeds.items())
        + cfg.canonical_text())
    return report


def _defend(cfg, m: ModelEntry, d: DefenseEntry, base, train_set, out: Path):
    if d.method == "none":
        return base
    path = out / "models" / f"{m.name}.{d.name}.pcm"
    spec = ModelSpec(m.arch, m.seed)
    if d.method == "ablation":
        if path.exists():
            return load_defended(path)
        k = retention_k(d.k_fraction, cfg.size, cfg.size)
        dm = certificate_retrain(spec, train_set, k, _train_cfg(cfg, m.seed), d.rounds)
        save_defended(path, dm)
        return dm
    if path.exists():
        return load_model(path)
    warmup = d.warmup if d.warmup >= 0 else cfg.epochs // 4
    ramp = d.ramp if d.ramp >= 0 else cfg.epochs // 4
    side = max(cfg.attack_sides, default=cfg.size // 4)
    inner = replace(_attack_cfg(cfg, side, m.seed), iterations=d.inner_iterations, placement="random")
    model, _ = adversarial_train(spec, train_set, _train_cfg(cfg, m.seed), inner, warmup, ramp)
    save_model(path, model)
    return model


def _predict_count(target, image, seed: int) -> float:
    if isinstance(target, DefendedModel):
        return float(target.predict(image, seed=seed).sum())
    return float(predict_density(target, image).sum())


def _evaluate(cfg, target, test_set, side, clean, universal):
    y = clean if clean is not None else np.array(
        [_predict_count(target, s.image, cfg.seed + i) for i, s in enumerate(test_set)])
    if side == 0:
        return y, y.copy()
    y_adv = []
    for i, s in enumerate(test_set):
        if universal is not None:
            adv = apply_patch(s.image, upright(universal, s.image.shape[-2:]))
        else:
            acfg = _attack_cfg(cfg, side, cfg.seed + i)
            victim = target.attack_view(seed=cfg.seed + i) if isinstance(target, DefendedModel) else target
            _, adv, _ = run_whitebox_attack(victim, s.image, s.density, acfg)
        y_adv.append(_predict_count(target, adv, cfg.seed + i))
    return y, np.array(y_adv)


def _write_eval(path, gt, y, y_adv):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "gt", "y", "y_adv"])
        for i, row in enumerate(zip(gt, y, y_adv)):
            w.writerow([i] + [repr(float(v)) for v in row])


def _read_eval(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["y"]) for r in rows]), np.array([float(r["y_adv"]) for r in rows]))
