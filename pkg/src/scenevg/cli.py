"""``scenevg`` command line: generate, stats, train, eval, gradcheck, matrix.

Every command reads one YAML config. Artifacts go under ``paths.out_dir``
(overridable with ``SCENEVG_OUT_DIR``); each artifact directory receives a
``config.yaml`` echo of the resolved config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import kevili as kevili_mod
from . import levilm as levilm_mod
from . import lexicon
from .checkpoint import load_model, save_model
from .dataio.corpus import by_split, compute_stats, format_stats, split_dataset, stats_json
from .dataio.generator import GeneratorConfig, SceneGenerator
from .dataio.records import load_records, save_records
from .diagnostics import kevili_gradient_error, levilm_gradient_error
from .evaluation import emit_report, evaluate, per_sample_correct, summarize
from .optim import NonFiniteLossError

OUT_DIR_ENV = "SCENEVG_OUT_DIR"
COMMANDS = ("generate", "stats", "train", "eval", "gradcheck", "matrix")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeneratorSection(_Section):
    n_samples: int = Field(2000, ge=1)
    image_size: int = 256
    cell_size: int = 64
    min_entities: int = 3
    max_entities: int = 4
    stories_per_image: int = 2
    queries_per_story: int = 5
    difficulty_mix: tuple[float, float, float] = (0.3, 0.3, 0.4)
    size_mix: tuple[float, float, float] = (0.3, 0.4, 0.3)
    min_anchor_iou: float = 0.55
    filler_rate: float = Field(1.0, ge=0, le=1)
    remark_rate: float = Field(0.4, ge=0, le=1)
    one_hop_rate: float = Field(0.0, ge=0, le=1)


class ModelSection(_Section):
    kind: Literal["levilm", "kevili"] = "levilm"
    preset: Literal["toy", "paper"] = "toy"
    variant: Literal["Q", "Q+K", "Q+K+S"] = "Q+K"
    regime: Literal["ZS", "LP", "FT"] = "FT"
    # architecture overrides passed straight to the estimator
    params: dict[str, Any] = {}
    # levilm: permute interchangeable lexicon words during training
    swap_lexicon: bool = False


class TrainingSection(_Section):
    """Overrides on top of the model preset; unset fields keep preset values."""
    epochs: Optional[int] = Field(None, ge=0)
    batch_size: Optional[int] = Field(None, ge=1)
    lr: Optional[float] = Field(None, gt=0)
    encoder_lr: Optional[float] = Field(None, gt=0)
    weight_decay: Optional[float] = Field(None, ge=0)
    decay_epoch: Optional[int] = Field(None, ge=0)
    max_steps: Optional[int] = Field(None, ge=1)


class EvalSection(_Section):
    split: Literal["train", "val", "test"] = "test"
    strategies: list[Literal["H", "R", "U"]] = ["H", "R", "U"]
    draws: int = Field(1, ge=1)


class MatrixSection(_Section):
    variants: list[Literal["Q", "Q+K", "Q+K+S"]] = ["Q", "Q+K", "Q+K+S"]
    regimes: list[Literal["ZS", "LP", "FT"]] = ["ZS", "LP", "FT"]
    strategies: list[Literal["H", "R", "U"]] = ["H", "R", "U"]
    draws: int = Field(1, ge=1)


class GradcheckSection(_Section):
    epsilon: float = Field(1e-4, gt=0)
    n_samples: int = Field(2, ge=1)
    tolerance: float = Field(1e-3, gt=0)
    models: list[Literal["kevili", "levilm"]] = ["kevili", "levilm"]


class PathsSection(_Section):
    data_dir: str = "data"
    out_dir: str = "runs"
    checkpoint: Optional[str] = None


class RunConfig(_Section):
    seed: int
    workers: int = Field(1, ge=1)
    generator: GeneratorSection = GeneratorSection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    eval: EvalSection = EvalSection()
    matrix: MatrixSection = MatrixSection()
    gradcheck: GradcheckSection = GradcheckSection()
    paths: PathsSection = PathsSection()


class ConfigError(ValueError):
    pass


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [f"  {'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors()]
        raise ConfigError(f"invalid config {path}:\n" + "\n".join(lines)) from exc
    if OUT_DIR_ENV in os.environ:
        cfg.paths.out_dir = os.environ[OUT_DIR_ENV]
    return cfg


# -- plumbing ------------------------------------------------------------------------


class EventLog:
    """Line-delimited JSON events on stderr and, once opened, in a file."""

    def __init__(self):
        self.fh = None

    def open(self, path: Path):
        self.close()
        self.fh = open(path, "w")

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None

    def __call__(self, event: str, **fields):
        line = json.dumps({"event": event, **fields}, sort_keys=True)
        print(line, file=sys.stderr, flush=True)
        if self.fh is not None:
            self.fh.write(line + "\n")
            self.fh.flush()


def _artifact_dir(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.paths.out_dir) / name
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.yaml").write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True))
    return d


def _seed_everything(seed: int, workers: int):
    torch.manual_seed(seed)
    torch.set_num_threads(workers)


def _data_file(cfg: RunConfig) -> Path:
    path = Path(cfg.paths.data_dir) / "samples.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `generate` first")
    return path


def _generator_config(cfg: RunConfig) -> GeneratorConfig:
    g = cfg.generator.model_dump(exclude={"n_samples"})
    return GeneratorConfig(**{**g, "difficulty_mix": tuple(g["difficulty_mix"]),
                              "size_mix": tuple(g["size_mix"]), "seed": cfg.seed})


def build_estimator(cfg: RunConfig, variant: str | None = None, regime: str | None = None,
                    log=None):
    """Estimator from the model preset plus training overrides."""
    m, t = cfg.model, cfg.training
    variant = variant or m.variant
    if m.kind == "kevili":
        p = kevili_mod.PRESETS[m.preset]
        params = {**p["config"].__dict__, **{k: p[k] for k in
                                             ("lr", "encoder_lr", "batch_size", "epochs", "decay_epoch")}}
        overrides = {**m.params, **t.model_dump(exclude_none=True)}
        return _construct(kevili_mod.KeViLI, variant=variant, random_state=cfg.seed,
                          **{**params, **overrides})
    params = dict(levilm_mod.PRESETS[m.preset])
    overrides = {**m.params, **t.model_dump(exclude_none=True)}
    if m.swap_lexicon:
        overrides["swap_groups"] = (lexicon.NAMES, lexicon.PROFESSIONS, lexicon.RELATIONS)
    if "encoder_lr" in overrides:
        overrides["text_lr"] = overrides.pop("encoder_lr")
    for key in ("decay_epoch", "max_steps"):
        if overrides.pop(key, None) is not None and log is not None:
            log("ignored_option", option=key, model="levilm")
    return _construct(levilm_mod.LeViLM, variant=variant, regime=regime or m.regime,
                      random_state=cfg.seed, **{**params, **overrides})


def _construct(cls, **params):
    unknown = set(params) - set(cls().get_params())
    if unknown:
        raise ConfigError(f"model.params: unknown {cls.__name__} options {sorted(unknown)}")
    return cls(**params)


# -- commands ------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, log) -> int:
    gen = SceneGenerator(_generator_config(cfg))
    samples = split_dataset(gen.generate(cfg.generator.n_samples), seed=cfg.seed)
    data_dir = Path(cfg.paths.data_dir)
    save_records(samples, data_dir / "samples.jsonl")
    (data_dir / "manifest.json").write_text(json.dumps(gen.manifest_, indent=2, sort_keys=True) + "\n")
    (data_dir / "config.yaml").write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True))
    log("generated", n_samples=len(samples), n_images=gen.manifest_["n_images"], path=str(data_dir))
    return 0


def cmd_stats(cfg: RunConfig, log) -> int:
    samples = load_records(_data_file(cfg))
    stats = compute_stats(samples)
    out = _artifact_dir(cfg, "stats")
    (out / "stats.json").write_text(stats_json(stats))
    text = format_stats(stats)
    (out / "stats.txt").write_text(text)
    print(text, end="")
    log("stats", n_samples=stats["n_samples"], path=str(out))
    return 0


def cmd_train(cfg: RunConfig, log) -> int:
    samples = load_records(_data_file(cfg))
    train = by_split(samples, "train")
    out = _artifact_dir(cfg, "train")
    log.open(out / "train_log.jsonl")
    est = build_estimator(cfg, log=log)
    log("train_start", model=cfg.model.kind, variant=est.variant, n_train=len(train))
    start = time.perf_counter()
    est.fit(train)
    curve = est.loss_history_
    unit = "step" if cfg.model.kind == "kevili" else "epoch"
    for i, value in enumerate(curve):
        log("loss", **{unit: i + 1, "loss": value})
    path = save_model(est, out / "model.npz")
    log("train_done", checkpoint=str(path), seconds=round(time.perf_counter() - start, 3))
    return 0


def _eval_reports(est, samples, strategies, seed, draws, regime):
    if isinstance(est, kevili_mod.KeViLI):
        return [evaluate(est, samples, "-", seed, variant=est.variant, regime=regime)]
    return [evaluate(est, samples, s, seed, draws, variant=est.variant, regime=regime)
            for s in strategies]


def cmd_eval(cfg: RunConfig, log) -> int:
    samples = by_split(load_records(_data_file(cfg)), cfg.eval.split)
    ckpt = Path(cfg.paths.checkpoint or Path(cfg.paths.out_dir) / "train" / "model.npz")
    est = load_model(ckpt)
    regime = getattr(est, "regime", "FT")
    reports = _eval_reports(est, samples, cfg.eval.strategies, cfg.seed, cfg.eval.draws, regime)
    out = _artifact_dir(cfg, "eval")
    (out / "report.json").write_text(emit_report(reports, "json"))
    table = emit_report(reports, "table")
    (out / "report.txt").write_text(table)
    print(table, end="")
    log("eval_done", checkpoint=str(ckpt), split=cfg.eval.split, n=len(samples))
    return 0


def cmd_gradcheck(cfg: RunConfig, log) -> int:
    gc = cfg.gradcheck
    samples = SceneGenerator(_generator_config(cfg)).generate(gc.n_samples)
    checks = {"kevili": kevili_gradient_error, "levilm": levilm_gradient_error}
    result = {"epsilon": gc.epsilon, "tolerance": gc.tolerance, "errors": {}}
    for name in gc.models:
        err = checks[name](samples, gc.epsilon, cfg.seed)
        result["errors"][name] = err
        log("gradcheck", model=name, max_relative_error=err)
    result["max_relative_error"] = max(result["errors"].values())
    result["passed"] = result["max_relative_error"] < gc.tolerance
    out = _artifact_dir(cfg, "gradcheck")
    (out / "gradcheck.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"max relative error {result['max_relative_error']:.3e} "
          f"({'pass' if result['passed'] else 'FAIL'} at {gc.tolerance:g})")
    return 0 if result["passed"] else 1


class DominanceError(AssertionError):
    pass


def check_dominance(correct: dict, context: str):
    """Assert U is at least as accurate as H and R, per sample and in aggregate."""
    if "U" not in correct:
        return
    u = np.asarray(correct["U"])
    for other in ("H", "R"):
        if other in correct:
            o = np.asarray(correct[other])
            if np.any(u < o - 1e-12) or u.mean() < o.mean() - 1e-12:
                raise DominanceError(f"{context}: strategy U below {other}")


def cmd_matrix(cfg: RunConfig, log) -> int:
    if cfg.model.kind != "levilm":
        raise ConfigError("matrix runs the region-matching model; set model.kind to levilm")
    samples = load_records(_data_file(cfg))
    train, test = by_split(samples, "train"), by_split(samples, cfg.eval.split)
    out = _artifact_dir(cfg, "matrix")
    log.open(out / "matrix_log.jsonl")
    mx = cfg.matrix
    reports = []
    for variant in mx.variants:
        for regime in mx.regimes:
            _seed_everything(cfg.seed, cfg.workers)
            est = build_estimator(cfg, variant, regime, log).fit(train)
            correct = {s: per_sample_correct(est, test, s, cfg.seed, mx.draws) for s in mx.strategies}
            check_dominance(correct, f"{variant}/{regime}")
            for s in mx.strategies:
                r = summarize(test, correct[s], s, variant, "LeViLM", regime)
                reports.append(r)
                log("cell", variant=variant, regime=regime, strategy=s, overall=r.overall)
    (out / "report.json").write_text(emit_report(reports, "json"))
    table = emit_report(reports, "table")
    (out / "report.txt").write_text(table)
    print(table, end="")
    return 0


HANDLERS = {"generate": cmd_generate, "stats": cmd_stats, "train": cmd_train,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck, "matrix": cmd_matrix}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="scenevg", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("config", help="YAML run configuration")
    args = parser.parse_args(argv)
    log = EventLog()
    try:
        cfg = load_config(args.config)
        _seed_everything(cfg.seed, cfg.workers)
        return HANDLERS[args.command](cfg, log)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        log("error", kind="non_finite_loss", message=str(exc))
        return 3
    except (FileNotFoundError, ValueError, DominanceError) as exc:
        log("error", kind=type(exc).__name__, message=str(exc))
        return 1
    finally:
        log.close()


if __name__ == "__main__":
    sys.exit(main())
