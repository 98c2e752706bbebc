"""Command line entry point: ``freqpure {train,attack,purify,eval,analyze}``.

Exit codes: 0 success, 1 usage or invalid input, 2 component failure,
3 every evaluation cell failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .attack import MODES, extract_perturbation, run_attack
from .bench import AttackCache, Components, run_sweep, select_subset
from .config import RunConfig
from .diffusion import purify, reverse_times
from .exceptions import AttackError, InvalidInputError, ModelLoadError, SolverError, TrainingError
from .io import export_images, export_png, load_batch, magnify_perturbation, save_batch
from .models.classifier import ToyClassifier, train_toy_classifier
from .models.data import make_toy_dataset
from .models.score import ScoreNetwork, train_toy_score_model
from .spectral import radial_spectrum

log = logging.getLogger("freqpure")

EXIT_OK, EXIT_USAGE, EXIT_COMPONENT, EXIT_ALL_FAILED = 0, 1, 2, 3
COMPONENT_ERRORS = (TrainingError, AttackError, SolverError, ModelLoadError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _mode(value):
    if value not in MODES:
        raise argparse.ArgumentTypeError(f"invalid mode {value!r}; choose from {{{', '.join(MODES)}}}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", type=Path, help="output directory for this command")
    common.add_argument("--workers", type=int, help="evaluation worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="freqpure", description="Fourier-domain attacks and diffusion purification on a toy pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("train", parents=[common], help="train the toy classifier and score network")

    p = sub.add_parser("attack", parents=[common], help="attack a seeded test subset")
    p.add_argument("--mode", type=_mode, help="{" + ", ".join(MODES) + "}")
    p.add_argument("--lambda", dest="lambda_", type=float, help="distortion weight")
    p.add_argument("--bins", type=int, default=16, help="radial spectrum bins")

    p = sub.add_parser("purify", parents=[common], help="purify a batch file")
    p.add_argument("input", type=Path, help="batch file (.npz) in the [0, 1] range")
    p.add_argument("--t-star", dest="t_star", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--snapshots", type=int, default=0, help="export the diffused image and K reverse-process frames")

    p = sub.add_parser("eval", parents=[common], help="run the evaluation grid, or score batch files")
    p.add_argument("inputs", nargs="*", type=Path, help="batch files to classify instead of running the grid")
    p.add_argument("--mode", type=_mode, action="append", help="restrict the grid to these modes (repeatable)")
    p.add_argument("--t-star", dest="t_star", type=float, action="append", help="t* values (repeatable)")
    p.add_argument("--dt", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)

    p = sub.add_parser("analyze", parents=[common], help="radial spectrum of a perturbation file")
    p.add_argument("input", type=Path, help="perturbation batch file (signed range)")
    p.add_argument("--bins", type=int, default=16)
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if getattr(args, "lambda_", None) is not None:
        cfg = replace(cfg, attack=replace(cfg.attack, lambda_=args.lambda_))
    if getattr(args, "dt", None) is not None:
        cfg = replace(cfg, purify=replace(cfg.purify, dt=args.dt))
    t_star = getattr(args, "t_star", None)
    if isinstance(t_star, list):
        cfg = replace(cfg, eval=replace(cfg.eval, t_star_list=tuple(t_star)))
    elif t_star is not None:
        cfg = replace(cfg, purify=replace(cfg.purify, t_star=t_star))
    modes = getattr(args, "mode", None)
    if isinstance(modes, list):
        cfg = replace(cfg, eval=replace(cfg.eval, modes=tuple(modes)))
    elif modes is not None:
        cfg = replace(cfg, attack=replace(cfg.attack, mode=modes))
    return cfg


def model_dir(cfg: RunConfig) -> Path:
    """Weights depend only on data, training settings, schedule and seed."""
    key = json.dumps([cfg.dataset.to_dict(), cfg.to_dict()["train"], cfg.to_dict()["schedule"], cfg.seed],
                     sort_keys=True)
    return Path(cfg.output_dir) / "models" / hashlib.sha256(key.encode()).hexdigest()[:16]


def load_models(cfg: RunConfig, need_classifier=True, need_score=True):
    d = model_dir(cfg)
    out = []
    for need, name, cls in ((need_classifier, "classifier.pt", ToyClassifier), (need_score, "score.pt", ScoreNetwork)):
        if not need:
            continue
        path = d / name
        if not path.is_file():
            raise UsageError(f"no trained model at {path}; run `freqpure train` with the same config first")
        out.append(cls.load(path))
    return out


def _write_curve(path: Path, curve):
    np.savetxt(path, np.column_stack([np.arange(len(curve)), curve]), fmt=["%d", "%.10g"], delimiter="\t",
               header="epoch\tloss", comments="")


def cmd_train(cfg: RunConfig, args) -> int:
    out = args.out or model_dir(cfg)
    data = make_toy_dataset(cfg.dataset)
    t0 = time.perf_counter()
    clf = train_toy_classifier(cfg.dataset, cfg.train.classifier_epochs, cfg.seed, dataset=data,
                               width=cfg.train.classifier_width, noise_std=cfg.train.classifier_noise)
    log.info("classifier: %.2f%% test accuracy (%.0fs)", clf.test_accuracy_, time.perf_counter() - t0)
    score = train_toy_score_model(cfg.dataset, cfg.schedule, cfg.train.score_epochs, cfg.seed, dataset=data,
                                  width=cfg.train.score_width, batch_size=cfg.train.score_batch_size,
                                  learning_rate=cfg.train.score_learning_rate)
    log.info("score network trained (%.0fs total)", time.perf_counter() - t0)
    # write only after both models trained, via a staging directory
    out = Path(out)
    stage = out.with_name(out.name + ".partial")
    stage.mkdir(parents=True, exist_ok=True)
    clf.save(stage / "classifier.pt")
    score.save(stage / "score.pt", input_shape=cfg.dataset.image_size)
    _write_curve(stage / "classifier_loss.tsv", clf.loss_curve_)
    _write_curve(stage / "score_loss.tsv", score.loss_curve)
    (stage / "train_summary.json").write_text(json.dumps({
        "config_hash": cfg.hash(), "seed": cfg.seed, "classifier_test_accuracy": clf.test_accuracy_,
        "classifier_hash": clf.weights_hash(), "score_hash": score.weights_hash(),
    }, indent=2, sort_keys=True))
    out.mkdir(parents=True, exist_ok=True)
    for f in stage.iterdir():
        f.replace(out / f.name)
    stage.rmdir()
    print(out)
    return EXIT_OK


def cmd_attack(cfg: RunConfig, args) -> int:
    (clf,) = load_models(cfg, need_score=False)
    data = make_toy_dataset(cfg.dataset)
    idx = select_subset(len(data.x_test), cfg.eval.subset_size, cfg.seed)
    x, y = data.x_test[idx], data.y_test[idx]
    out = Path(args.out or cfg.run_dir / f"attack_{cfg.attack.mode}")
    adv, trace = run_attack(x, y, clf, cfg.attack, seed=cfg.seed)
    delta = extract_perturbation(x, adv.data)
    meta = dict(mode=cfg.attack.mode, seed=cfg.seed, config_hash=cfg.hash())
    save_batch(out / "adversarial.npz", adv, y.numpy(), indices=idx, **meta)
    save_batch(out / "perturbation.npz", delta, y.numpy(), indices=idx, **meta)
    trace.save(out / "trace.tsv")
    radial_spectrum(delta, bins=args.bins).save(out / "spectrum.tsv")
    export_images(adv, out / "png", "adversarial")
    for i, d in enumerate(delta.numpy()):
        export_png(magnify_perturbation(d), out / "png" / f"perturbation_x20_{i:04d}.png")
    log.info("adversarial accuracy %.2f%%", clf.accuracy(adv.data, y))
    print(out)
    return EXIT_OK


def snapshot_steps(n_steps: int, k: int):
    """Indices of ``k`` evenly spaced intermediate reverse steps, excluding the final one."""
    if k <= 0:
        return []
    return sorted({min(n_steps - 2, round((j + 1) * n_steps / (k + 1)) - 1) for j in range(k)} - {-1})


def cmd_purify(cfg: RunConfig, args) -> int:
    batch, labels, meta = load_batch(args.input)
    if batch.range_tag != "unit":
        raise InvalidInputError(
            f"{args.input} carries range_tag {batch.range_tag!r}; purify expects images in the unit [0, 1] range"
        )
    if args.snapshots < 0:
        raise InvalidInputError("--snapshots must be non-negative")
    (score,) = load_models(cfg, need_classifier=False)
    out = Path(args.out or args.input.parent / f"purified_t{cfg.purify.t_star:g}")
    n_steps = len(reverse_times(cfg.purify.t_star, cfg.purify.dt))
    if args.snapshots > n_steps - 1:
        raise InvalidInputError(f"--snapshots {args.snapshots} exceeds the {n_steps - 1} intermediate steps of this "
                                f"t*={cfg.purify.t_star:g}, dt={cfg.purify.dt:g} schedule")
    wanted = snapshot_steps(n_steps, args.snapshots)
    frames = {}

    def grab(k, t, x):
        if k == -1 or k in wanted:
            frames[k] = x.clone()

    result = purify(batch, cfg.schedule, score, cfg.purify, callback=grab if args.snapshots else None)
    save_batch(out / "purified.npz", result, labels, mode=str(meta.get("mode", "")), seed=cfg.purify.seed,
               config_hash=cfg.hash(), t_star=cfg.purify.t_star)
    export_images(result, out / "png", "purified")
    if args.snapshots:
        snap = out / "snapshots"
        for i in range(len(result.data)):
            export_png(((frames[-1][i] + 1) / 2).clamp(0, 1).numpy(), snap / f"sample{i:04d}_0_diffused.png")
            for j, k in enumerate(wanted):
                export_png(((frames[k][i] + 1) / 2).clamp(0, 1).numpy(), snap / f"sample{i:04d}_{j + 1}_step{k:04d}.png")
            export_png(result.data[i].numpy(), snap / f"sample{i:04d}_{len(wanted) + 1}_final.png")
    print(out)
    return EXIT_OK


def _eval_files(cfg: RunConfig, args) -> int:
    (clf,) = load_models(cfg, need_score=False)
    rows = []
    for path in args.inputs:
        batch, labels, meta = load_batch(path)
        if batch.range_tag != "unit":
            raise InvalidInputError(f"{path} carries range_tag {batch.range_tag!r}; the classifier expects unit range")
        rows.append({"file": str(path), "mode": str(meta.get("mode", "")), "n": int(len(labels)),
                     "accuracy": clf.accuracy(batch.data, labels)})
    out = Path(args.out or cfg.run_dir / "eval_files")
    out.mkdir(parents=True, exist_ok=True)
    (out / "accuracy.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    for r in rows:
        print(f"{r['accuracy']:.2f}\t{r['file']}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.inputs:
        return _eval_files(cfg, args)
    clf, score = load_models(cfg)
    data = make_toy_dataset(cfg.dataset)
    comps = Components(clf, score, data.x_test, data.y_test, cfg.schedule, cfg.attack, cfg.purify)
    out = Path(args.out or cfg.run_dir / "eval")
    cache = AttackCache(Path(cfg.output_dir) / "cache" / "attacks")
    t0 = time.perf_counter()
    report = run_sweep(cfg.eval, comps, workers=cfg.workers, cache=cache,
                       progress=lambda r: log.info("%s t*=%g repeat=%d %s %.0fs", r.mode, r.t_star, r.repeat,
                                                   r.status, r.wall_clock))
    paths = report.write(out)
    (out / "run_summary.json").write_text(json.dumps({
        "config_hash": cfg.hash(), "seed": cfg.seed, "workers": cfg.workers,
        "wall_clock_seconds": time.perf_counter() - t0,
        "cells": [{"mode": r.mode, "t_star": r.t_star, "repeat": r.repeat, "status": r.status,
                   "error": r.error, "wall_clock": r.wall_clock} for r in report.results],
        "failed": len(report.failed), "versions": {"torch": torch.__version__, "numpy": np.__version__},
    }, indent=2, sort_keys=True))
    print(paths["table"].read_text(), end="")
    if report.results and len(report.failed) == len(report.results):
        return EXIT_ALL_FAILED
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args) -> int:
    batch, _, _ = load_batch(args.input)
    if batch.range_tag != "signed":
        raise InvalidInputError(f"{args.input} is not a perturbation file (range_tag {batch.range_tag!r}, expected 'signed')")
    out = Path(args.out or args.input.parent)
    out.mkdir(parents=True, exist_ok=True)
    radial_spectrum(batch, bins=args.bins).save(out / "spectrum.tsv")
    print(out / "spectrum.tsv")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "purify": cmd_purify, "eval": cmd_eval, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, InvalidInputError) as exc:
        print(f"freqpure {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except COMPONENT_ERRORS as exc:
        print(f"freqpure {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPONENT


if __name__ == "__main__":
    sys.exit(main())
