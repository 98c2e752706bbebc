"""Evaluation protocol: seeded test subsets, four accuracy metrics, repeated runs and the t* sweep.

A *cell* is one (mode, t*, repeat). Each cell reports clean, adversarial,
purified-clean and purified-adversarial top-1 accuracy (percent) on its
subset. Attacks are cached by (classifier hash, mode, subset seed, attack
config hash), so sweeping t* purifies the very same adversarial batch.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .attack import MODES, AttackConfig, run_attack
from .diffusion import DiffusionSchedule, PurifyConfig, ScoreModel, purify
from .exceptions import InvalidInputError
from .validation import check_images, check_labels

log = logging.getLogger(__name__)

METRICS = ("clean", "adversarial", "purified_clean", "purified_adversarial")
CLEAN_METRICS = ("clean", "purified_clean")
NO_ATTACK = "none"


@dataclass(frozen=True)
class EvalPlan:
    """Grid definition. Repeat ``r`` uses seed ``seeds[r]`` and subset ``r % subset_count``;
    subset ``j`` is drawn with seed ``seeds[j]``."""

    subset_size: int = 512
    subset_count: int = 3
    repeats: int = 3
    modes: tuple = tuple(MODES)
    t_star_list: tuple = (0.15,)
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        for name in ("modes", "t_star_list", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if self.subset_size < 1 or self.subset_count < 1 or self.repeats < 1:
            raise InvalidInputError("subset_size, subset_count and repeats must be positive")
        for m in self.modes:
            if m not in MODES:
                raise InvalidInputError(f"unknown attack mode {m!r}; choose from {{{', '.join(MODES)}}}")
        if not self.t_star_list:
            raise InvalidInputError("t_star_list must not be empty")
        for t in self.t_star_list:
            if not 0.0 < t < 1.0:
                raise InvalidInputError(f"every t_star must lie in the open interval (0, 1), got {t}")
        if len(self.seeds) < max(self.repeats, self.subset_count):
            raise InvalidInputError(f"need at least max(repeats, subset_count) seeds, got {len(self.seeds)}")

    def run_seed(self, repeat: int) -> int:
        return int(self.seeds[repeat])

    def subset_seed(self, repeat: int) -> int:
        return int(self.seeds[repeat % self.subset_count])

    def cells(self):
        """Grid in canonical order; an empty mode list yields clean-only cells."""
        modes = self.modes or (NO_ATTACK,)
        return [(m, t, r) for m in modes for t in self.t_star_list for r in range(self.repeats)]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def select_subset(n: int, size: int, seed: int) -> np.ndarray:
    """Sorted indices of ``size`` distinct samples out of ``n``; a pure function of its arguments."""
    if size > n:
        raise InvalidInputError(f"subset_size {size} exceeds the {n} available test samples")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=size, replace=False))


@dataclass
class CellResult:
    model: str
    mode: str
    t_star: float
    repeat: int
    seed: int
    subset_seed: int
    accuracies: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    wall_clock: float = 0.0

    def record(self) -> dict:
        """Machine-readable form; excludes wall-clock so reports are byte-reproducible."""
        return {
            "model": self.model, "mode": self.mode, "t_star": self.t_star, "repeat": self.repeat,
            "seed": self.seed, "subset_seed": self.subset_seed, "status": self.status, "error": self.error,
            "accuracies": {k: self.accuracies[k] for k in METRICS if k in self.accuracies},
        }


@dataclass
class EvalReport:
    results: list = field(default_factory=list)
    subsets: dict = field(default_factory=dict)
    metrics: tuple = METRICS

    @property
    def failed(self):
        return [r for r in self.results if r.status != "ok"]

    def groups(self):
        """``{(model, mode, t_star): {metric: [per-run accuracies]}}`` over completed cells."""
        out = {}
        for r in self.results:
            if r.status != "ok":
                continue
            g = out.setdefault((r.model, r.mode, r.t_star), {m: [] for m in self.metrics})
            for m in self.metrics:
                if m in r.accuracies:
                    g[m].append(r.accuracies[m])
        return out

    def summary(self):
        """Per (model, mode, t_star, metric): runs, mean and sample std (n - 1; 0 for one run)."""
        rows = []
        for (model, mode, t), g in self.groups().items():
            for m in self.metrics:
                runs = g[m]
                if not runs:
                    continue
                mean = math.fsum(runs) / len(runs)
                std = statistics.stdev(runs) if len(runs) > 1 else 0.0
                rows.append({"model": model, "mode": mode, "t_star": t, "metric": m, "runs": runs,
                             "mean": mean, "std": std})
        return rows

    def value(self, mode, t_star, metric, model=None):
        for row in self.summary():
            if row["mode"] == mode and row["t_star"] == t_star and row["metric"] == metric:
                if model is None or row["model"] == model:
                    return row
        raise KeyError((mode, t_star, metric))

    def to_jsonl(self) -> str:
        lines = [json.dumps(r.record(), sort_keys=True) for r in self.results]
        lines += [json.dumps({"summary": row}, sort_keys=True) for row in self.summary()]
        return "\n".join(lines) + "\n"

    def render(self) -> str:
        """Plain-text table: one row per (model, mode, t*), one column per metric, ``mean ± std``."""
        header = ["model", "mode", "t*"] + list(self.metrics)
        body = []
        for (model, mode, t), g in self.groups().items():
            cells = []
            for m in self.metrics:
                runs = g[m]
                if runs:
                    std = statistics.stdev(runs) if len(runs) > 1 else 0.0
                    cells.append(f"{math.fsum(runs) / len(runs):.2f} ± {std:.2f}")
                else:
                    cells.append("-")
            body.append([model, mode, f"{t:g}"] + cells)
        widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
        fmt = lambda row: "  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip()
        lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
        if self.failed:
            lines.append("")
            lines += [f"FAILED {r.mode} t*={r.t_star:g} repeat={r.repeat}: {r.error}" for r in self.failed]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"records": out / "report.jsonl", "table": out / "report.txt", "subsets": out / "subsets.json"}
        paths["records"].write_text(self.to_jsonl())
        paths["table"].write_text(self.render())
        paths["subsets"].write_text(json.dumps({str(k): v for k, v in sorted(self.subsets.items())}, sort_keys=True))
        return paths


def model_hash(model) -> str:
    fn = getattr(model, "weights_hash", None)
    return fn()[:16] if fn is not None else f"obj{id(model):x}"


class AttackCache:
    """Content-addressed store of adversarial batches.

    Attack keys are ``(classifier hash, mode, subset seed, attack config
    hash)``; purified-clean accuracies are memoised under their own keys so
    that every attack mode of a (t*, repeat) shares one purification of the
    clean subset. With a directory, entries persist as ``<dir>/<sha256 of key>.pt``.
    Concurrent requests for the same key compute it once.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self._mem = {}
        self._locks = {}
        self._guard = threading.Lock()
        self.misses = 0

    @staticmethod
    def key(*parts):
        return tuple(str(p) for p in parts)

    def _path(self, key):
        digest = hashlib.sha256(json.dumps(key).encode()).hexdigest()[:24]
        return self.directory / f"{digest}.pt"

    def get_or_compute(self, key, compute):
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key in self._mem:
                return self._mem[key]
            if self.directory is not None and self._path(key).is_file():
                value = torch.load(self._path(key), weights_only=True)
            else:
                self.misses += 1
                value = compute()
                if self.directory is not None:
                    self.directory.mkdir(parents=True, exist_ok=True)
                    torch.save(value, self._path(key))
            self._mem[key] = value
            return value


def _accuracy(classifier, x, y, batch_size=256) -> float:
    with torch.no_grad():
        fn = getattr(classifier, "logits", classifier)
        pred = torch.cat([fn(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])
    return 100.0 * (pred == y).double().mean().item()


@dataclass
class Components:
    classifier: object
    score: ScoreModel
    x_test: torch.Tensor
    y_test: torch.Tensor
    schedule: DiffusionSchedule = DiffusionSchedule()
    attack_config: AttackConfig = AttackConfig()
    purify_config: PurifyConfig = PurifyConfig()
    model_name: str = "toy"

    def __post_init__(self):
        self.x_test = check_images(self.x_test, range_tag="unit")
        self.y_test = check_labels(self.y_test, len(self.x_test))


def evaluate_cell(classifier, score, schedule, mode, t_star, plan: EvalPlan, seed, *, x, y, repeat=0,
                  attack_config: AttackConfig = AttackConfig(), purify_config: PurifyConfig = PurifyConfig(),
                  cache: AttackCache | None = None, model_name="toy") -> CellResult:
    """Four accuracies for one cell. Errors are captured in the returned record, not raised."""
    subset_seed = plan.subset_seed(repeat)
    result = CellResult(model_name, mode, float(t_star), repeat, int(seed), subset_seed)
    start = time.perf_counter()
    try:
        idx = torch.from_numpy(select_subset(len(x), plan.subset_size, subset_seed))
        xs, ys = x[idx], y[idx]
        pcfg = replace(purify_config, t_star=float(t_star), seed=int(seed))
        cache = cache if cache is not None else AttackCache()
        pkey = cache.key("purified_clean", model_hash(classifier), model_hash(score), subset_seed,
                         json.dumps(asdict(pcfg), sort_keys=True), json.dumps(asdict(schedule), sort_keys=True))
        acc = {"clean": _accuracy(classifier, xs, ys),
               "purified_clean": cache.get_or_compute(
                   pkey, lambda: _accuracy(classifier, purify(xs, schedule, score, pcfg).data, ys))}
        if mode != NO_ATTACK:
            acfg = replace(attack_config, mode=mode)
            key = cache.key("attack", model_hash(classifier), mode, subset_seed, acfg.hash())
            x_adv = cache.get_or_compute(key, lambda: run_attack(xs, ys, classifier, acfg, seed=subset_seed)[0].data)
            acc["adversarial"] = _accuracy(classifier, x_adv, ys)
            acc["purified_adversarial"] = _accuracy(classifier, purify(x_adv, schedule, score, pcfg).data, ys)
        result.accuracies = acc
    except Exception as exc:  # a failed cell must not abort the sweep
        log.warning("cell %s t*=%s repeat=%d failed: %s", mode, t_star, repeat, exc)
        result.status, result.error = "failed", f"{type(exc).__name__}: {exc}"
    result.wall_clock = time.perf_counter() - start
    return result


def run_sweep(plan: EvalPlan, components: Components, workers: int = 1, cache: AttackCache | None = None,
              progress=None) -> EvalReport:
    """Evaluate every cell of ``plan``; results are assembled in grid order whatever the completion order."""
    plan.validate()
    if workers < 1:
        raise InvalidInputError(f"workers must be positive, got {workers}")
    cache = cache if cache is not None else AttackCache()
    cells = plan.cells()
    c = components

    def job(cell):
        mode, t, r = cell
        res = evaluate_cell(c.classifier, c.score, c.schedule, mode, t, plan, plan.run_seed(r), x=c.x_test,
                            y=c.y_test, repeat=r, attack_config=c.attack_config, purify_config=c.purify_config,
                            cache=cache, model_name=c.model_name)
        if progress is not None:
            progress(res)
        return res

    if workers == 1:
        results = [job(cell) for cell in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, cells))
    report = EvalReport(results=results, metrics=METRICS if plan.modes else CLEAN_METRICS)
    for j in range(plan.subset_count):
        s = plan.subset_seed(j)
        report.subsets[s] = select_subset(len(c.x_test), plan.subset_size, s).tolist()
    return report
