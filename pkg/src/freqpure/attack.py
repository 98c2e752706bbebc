"""Magnitude / phase / pixel adversarial perturbations optimised against a differentiable classifier.

Each image is attacked independently: the batch is only a vectorisation
device. Every image keeps its own early-stopping counter and incumbent, and
leaves the active set once it has gone ``patience`` iterations without a
strict improvement.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import AttackError, InvalidInputError
from .spectral import reflect
from .validation import ImageBatch, as_tensor, check_images, check_labels, check_same_shape

MODES = {
    "pixel": frozenset({"pixel"}),
    "mag": frozenset({"mag"}),
    "phase": frozenset({"phase"}),
    "phase_mag": frozenset({"mag", "phase"}),
    "all": frozenset({"mag", "phase", "pixel"}),
}


def parse_mode(mode: str) -> frozenset:
    try:
        return MODES[mode]
    except KeyError:
        raise InvalidInputError(f"unknown attack mode {mode!r}; choose from {{{', '.join(MODES)}}}") from None


@dataclass(frozen=True)
class AttackConfig:
    lambda_: float = 5e4
    learning_rate: float = 5e-3
    weight_decay: float = 5e-6
    max_iterations: int = 1000
    patience: int = 5
    mode: str = "all"

    def __post_init__(self):
        parse_mode(self.mode)
        if self.lambda_ < 0:
            raise InvalidInputError("lambda_ must be non-negative")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise InvalidInputError("learning_rate must be positive and weight_decay non-negative")
        if self.max_iterations < 1 or self.patience < 1:
            raise InvalidInputError("max_iterations and patience must be positive")

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PerturbationSet:
    """Multiplicative magnitude, additive phase (radians) and additive pixel fields."""

    delta_mag: torch.Tensor
    delta_phase: torch.Tensor
    delta_pixel: torch.Tensor
    active_modes: frozenset = frozenset()

    @classmethod
    def identity(cls, shape, active_modes=frozenset(), dtype=torch.float32):
        unknown = set(active_modes) - {"mag", "phase", "pixel"}
        if unknown:
            raise InvalidInputError(f"unknown perturbation modes {sorted(unknown)}")
        return cls(
            delta_mag=torch.ones(shape, dtype=dtype),
            delta_phase=torch.zeros(shape, dtype=dtype),
            delta_pixel=torch.zeros(shape, dtype=dtype),
            active_modes=frozenset(active_modes),
        )

    def detach(self) -> "PerturbationSet":
        return PerturbationSet(
            self.delta_mag.detach().clone(),
            self.delta_phase.detach().clone(),
            self.delta_pixel.detach().clone(),
            self.active_modes,
        )


@dataclass
class AttackTrace:
    """Per-iteration batch aggregates of one attack run.

    ``objective`` averages the current objective of active images and the
    incumbent objective of images that already stopped; ``best`` averages the
    incumbents and is therefore non-increasing.
    """

    rows: list = field(default_factory=list)
    stop_iterations: np.ndarray | None = None
    perturbation: PerturbationSet | None = None

    columns = ("iteration", "objective", "l2", "cross_entropy", "best", "active", "imag_residual")

    def append(self, **row):
        self.rows.append(tuple(row[c] for c in self.columns))

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t")
            writer.writerow(self.columns)
            for r in self.rows:
                writer.writerow([r[0]] + [f"{v:.10g}" for v in r[1:]])

    @classmethod
    def load(cls, path) -> "AttackTrace":
        trace = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh, delimiter="\t")
            header = next(reader)
            for r in reader:
                vals = dict(zip(header, r))
                trace.rows.append(tuple(int(vals[c]) if c in ("iteration", "active") else float(vals[c]) for c in cls.columns))
        return trace


def apply_perturbations(x, p: PerturbationSet, *, return_residual=False):
    """Perturbed image ``clip01(ifft(clip0inf(M * d_mag) * exp(i(phi + d_phase))) + d_pixel)``.

    Computed as ``X * clamp(d_mag, 0) * exp(i d_phase)``, which is the same
    quantity because ``M >= 0``, but avoids differentiating ``angle`` at
    empty bins. Clamps pass gradients inside the interval and block them
    outside.
    """
    x = as_tensor(x)
    for name in ("delta_mag", "delta_phase", "delta_pixel"):
        check_same_shape(x, getattr(p, name), ("x", name))
    residual = 0.0
    if p.active_modes & {"mag", "phase"}:
        spectrum = torch.fft.fft2(x)
        if "mag" in p.active_modes:
            spectrum = spectrum * p.delta_mag.clamp(min=0)
        if "phase" in p.active_modes:
            spectrum = spectrum * torch.polar(torch.ones_like(p.delta_phase), p.delta_phase)
        inv = torch.fft.ifft2(spectrum)
        residual = inv.imag.detach().abs().max().item()
        intermediate = inv.real
    else:
        intermediate = x
    if "pixel" in p.active_modes:
        intermediate = intermediate + p.delta_pixel
    out = intermediate.clamp(0.0, 1.0)
    return (out, residual) if return_residual else out


def distortion(x_adv: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Per-image mean squared pixel difference.

    Squared rather than root-mean-square: RMS has no gradient at zero
    distortion, which is where every attack starts.
    """
    return (x_adv - x).pow(2).flatten(1).mean(dim=1)


def attack_loss(x_adv, x, logits, labels, lambda_: float) -> torch.Tensor:
    """``lambda * l2(x_adv, x) - sum_k y_k log softmax(logits)_k``, averaged over the batch.

    The second term is the cross-entropy of the true class, so this is the
    distortion-penalised classification loss; the attack descends on
    ``lambda * l2 - cross_entropy`` (see :func:`attack_objective`).
    """
    x_adv, x, logits = as_tensor(x_adv), as_tensor(x), as_tensor(logits)
    check_same_shape(x_adv, x, ("x_adv", "x"))
    if logits.ndim != 2 or logits.shape[0] != x.shape[0]:
        raise InvalidInputError(f"logits must have shape (batch={x.shape[0]}, K), got {tuple(logits.shape)}")
    labels = check_labels(labels, x.shape[0], logits.shape[1])
    return lambda_ * distortion(x_adv, x).mean() + F.cross_entropy(logits, labels)


def attack_objective(x_adv, x, logits, labels, lambda_: float) -> torch.Tensor:
    """Per-image attacker objective ``lambda * l2 - cross_entropy`` (lower is better for the attacker)."""
    return lambda_ * distortion(x_adv, x) - F.cross_entropy(logits, labels, reduction="none")


def extract_perturbation(x, x_adv) -> ImageBatch:
    x, x_adv = as_tensor(x), as_tensor(x_adv)
    check_same_shape(x, x_adv, ("x", "x_adv"))
    return ImageBatch(x_adv - x, "signed")


def classifier_logits(classifier, x: torch.Tensor) -> torch.Tensor:
    fn = getattr(classifier, "logits", None)
    return fn(x) if fn is not None else classifier(x)


class _RowAdam:
    """Adam over tensors whose first axis indexes independent problems.

    Only rows in the active index set are read or written, so a stopped
    image keeps its parameters and moments exactly. Weight decay is added to
    the gradient as in ``torch.optim.Adam``; parameters here are offsets from
    the identity perturbation, so decay pulls towards the identity.
    """

    def __init__(self, params, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]
        self.steps = 0

    @torch.no_grad()
    def step(self, grads, rows):
        self.steps += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.steps, 1 - b2 ** self.steps
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g + self.wd * p[rows]
            m[rows] = b1 * m[rows] + (1 - b1) * g
            v[rows] = b2 * v[rows] + (1 - b2) * g * g
            p[rows] -= self.lr * (m[rows] / c1) / ((v[rows] / c2).sqrt() + self.eps)


def _identity_result(x, labels, classifier, modes):
    with torch.no_grad():
        ce = F.cross_entropy(classifier_logits(classifier, x), labels, reduction="none")
    trace = AttackTrace()
    trace.append(iteration=0, objective=-ce.mean().item(), l2=0.0, cross_entropy=ce.mean().item(),
                 best=-ce.mean().item(), active=0, imag_residual=0.0)
    trace.stop_iterations = np.zeros(len(x), dtype=np.int64)
    trace.perturbation = PerturbationSet.identity(x.shape, modes, dtype=x.dtype)
    return ImageBatch(x.clone(), "unit"), trace


def run_attack(x, labels, classifier, cfg: AttackConfig = AttackConfig(), seed: int = 0):
    """Optimise the active perturbation fields of every image; return the best image per input.

    Returns ``(ImageBatch, AttackTrace)``. ``seed`` only fixes torch's global
    state for classifiers with stochastic layers; the optimisation itself is
    deterministic.
    """
    x = check_images(x, range_tag="unit").detach()
    n = x.shape[0]
    labels = check_labels(labels, n)
    modes = parse_mode(cfg.mode)
    torch.manual_seed(seed)
    if math.isinf(cfg.lambda_):
        # any non-zero distortion costs infinitely much: the optimum is the identity
        return _identity_result(x, labels, classifier, modes)

    names = [m for m in ("mag", "phase", "pixel") if m in modes]
    offsets = {m: torch.zeros_like(x) for m in names}
    opt = _RowAdam([offsets[m] for m in names], cfg.learning_rate, cfg.weight_decay)

    best_obj = torch.full((n,), float("inf"), dtype=x.dtype)
    best_img = x.clone()
    best_pert = {m: torch.zeros_like(x) for m in names}
    stall = torch.zeros(n, dtype=torch.long)
    stop_it = torch.full((n,), -1, dtype=torch.long)
    active = torch.arange(n)
    trace = AttackTrace()
    current = torch.zeros(n, dtype=x.dtype)

    for it in range(cfg.max_iterations):
        xa = x[active]
        leaves = {m: offsets[m][active].clone().requires_grad_(True) for m in names}
        pert = PerturbationSet.identity(xa.shape, modes, dtype=x.dtype)
        if "mag" in leaves:
            pert.delta_mag = 1.0 + leaves["mag"]
        if "phase" in leaves:
            pert.delta_phase = leaves["phase"]
        if "pixel" in leaves:
            pert.delta_pixel = leaves["pixel"]
        x_adv, residual = apply_perturbations(xa, pert, return_residual=True)
        try:
            logits = classifier_logits(classifier, x_adv)
        except Exception as exc:
            raise AttackError(f"classifier evaluation failed at iteration {it}: {exc}", it, trace) from exc
        dist = distortion(x_adv, xa)
        ce = F.cross_entropy(logits, labels[active], reduction="none")
        obj = cfg.lambda_ * dist - ce
        if not torch.isfinite(obj).all():
            raise AttackError(f"non-finite attack objective at iteration {it}", it, trace)

        with torch.no_grad():
            o = obj.detach()
            improved = o < best_obj[active]
            rows = active[improved]
            best_obj[rows] = o[improved]
            best_img[rows] = x_adv.detach()[improved]
            for m in names:
                best_pert[m][rows] = offsets[m][rows]
            stall[active] = torch.where(improved, 0, stall[active] + 1)
            current[active] = o
            done = stall[active] >= cfg.patience
            finished = active[done]
            stop_it[finished] = it
            current[finished] = best_obj[finished]
            trace.append(
                iteration=it,
                objective=current.mean().item(),
                l2=dist.detach().mean().item(),
                cross_entropy=ce.detach().mean().item(),
                best=best_obj.mean().item(),
                active=int(active.numel()),
                imag_residual=residual,
            )

        keep = ~done
        if not keep.any():
            break
        obj[keep].sum().backward()
        grads = [leaves[m].grad[keep] for m in names]
        active = active[keep]
        opt.step(grads, active)
        with torch.no_grad():
            if "mag" in offsets:
                offsets["mag"][active] = (offsets["mag"][active] + reflect(offsets["mag"][active])) / 2
            if "phase" in offsets:
                offsets["phase"][active] = (offsets["phase"][active] - reflect(offsets["phase"][active])) / 2

    stop_it[stop_it < 0] = len(trace) - 1
    trace.stop_iterations = stop_it.numpy()
    final = PerturbationSet.identity(x.shape, modes, dtype=x.dtype)
    if "mag" in best_pert:
        final.delta_mag = 1.0 + best_pert["mag"]
    if "phase" in best_pert:
        final.delta_phase = best_pert["phase"]
    if "pixel" in best_pert:
        final.delta_pixel = best_pert["pixel"]
    trace.perturbation = final
    return ImageBatch(best_img, "unit"), trace


class FourierAttack(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`run_attack`.

    ``transform`` needs the true labels, so call ``transform(X, y)`` or
    ``fit_transform(X, y)``. The trace of the last call is kept in
    ``trace_``.

    Parameters
    ----------
    classifier : object exposing ``logits(x)`` or a callable torch module
    mode : {"pixel", "mag", "phase", "phase_mag", "all"}
    lambda_ : float
        Weight of the mean-squared distortion term.
    """

    def __init__(self, classifier=None, mode="all", lambda_=5e4, learning_rate=5e-3, weight_decay=5e-6,
                 max_iterations=1000, patience=5, seed=0):
        self.classifier = classifier
        self.mode = mode
        self.lambda_ = lambda_
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.max_iterations = max_iterations
        self.patience = patience
        self.seed = seed

    def config(self) -> AttackConfig:
        return AttackConfig(self.lambda_, self.learning_rate, self.weight_decay, self.max_iterations,
                            self.patience, self.mode)

    def fit(self, X=None, y=None):
        if self.classifier is None:
            raise InvalidInputError("FourierAttack needs a classifier")
        self.config_ = self.config()
        return self

    def transform(self, X, y=None):
        if y is None:
            raise InvalidInputError("FourierAttack.transform needs the true labels y")
        if not hasattr(self, "config_"):
            self.fit()
        was_numpy = isinstance(X, np.ndarray)
        x_adv, self.trace_ = run_attack(X, y, self.classifier, self.config_, self.seed)
        return x_adv.numpy() if was_numpy else x_adv.data

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)
