"""Adapters for externally trained checkpoints described by a small manifest file.

A manifest is a flat YAML (or JSON) mapping::

    kind: classifier            # or "score"
    weights: resnet50.pt        # relative to the manifest's directory
    format: torchscript         # or "toy" (checkpoints written by this package)
    input_shape: [3, 224, 224]
    mean: [0.485, 0.456, 0.406] # per-channel normalisation applied before the network
    std: [0.229, 0.224, 0.225]
    class_count: 1000           # classifiers only
    value_range: unit           # range the network expects before mean/std: unit or signed
    time_scale: 1.0             # score only: network receives t * time_scale
    beta_min: 0.1               # score only
    beta_max: 20.0

TorchScript classifiers map ``(N, C, H, W) -> (N, class_count)``; TorchScript
score networks map ``(x, t) -> eps_hat`` with ``t`` a length-N vector. Every
load runs a smoke forward pass and fails with :class:`ModelLoadError`.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from ..diffusion import DiffusionSchedule
from ..exceptions import ModelLoadError
from ..validation import RANGES
from .classifier import ToyClassifier
from .score import ScoreNetwork

FORMATS = ("toy", "torchscript")


@dataclass(frozen=True)
class Manifest:
    path: Path
    kind: str
    weights: Path
    format: str
    input_shape: tuple
    mean: tuple
    std: tuple
    class_count: int | None
    value_range: str
    time_scale: float
    beta_min: float
    beta_max: float


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ModelLoadError("manifest file not found", path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ModelLoadError(f"manifest is not valid YAML/JSON: {exc}", path) from exc
    if not isinstance(raw, dict):
        raise ModelLoadError("manifest must be a key-value mapping", path)
    missing = [k for k in ("kind", "weights", "input_shape") if k not in raw]
    if missing:
        raise ModelLoadError(f"manifest lacks required keys {missing}", path)
    kind = raw["kind"]
    if kind not in ("classifier", "score"):
        raise ModelLoadError(f"kind must be 'classifier' or 'score', got {kind!r}", path)
    if kind == "classifier" and "class_count" not in raw:
        raise ModelLoadError("classifier manifest lacks class_count", path)
    fmt = raw.get("format", "toy")
    if fmt not in FORMATS:
        raise ModelLoadError(f"format must be one of {FORMATS}, got {fmt!r}", path)
    value_range = raw.get("value_range", "unit" if kind == "classifier" else "signed")
    if value_range not in RANGES:
        raise ModelLoadError(f"value_range must be one of {sorted(RANGES)}, got {value_range!r}", path)
    shape = tuple(int(v) for v in raw["input_shape"])
    if len(shape) != 3:
        raise ModelLoadError(f"input_shape must be [C, H, W], got {list(shape)}", path)
    weights = Path(raw["weights"])
    if not weights.is_absolute():
        weights = path.parent / weights
    c = shape[0]
    mean = tuple(float(v) for v in raw.get("mean", [0.0] * c))
    std = tuple(float(v) for v in raw.get("std", [1.0] * c))
    if len(mean) != c or len(std) != c or min(std) <= 0:
        raise ModelLoadError(f"mean/std need {c} entries with positive std", path)
    return Manifest(
        path=path, kind=kind, weights=weights, format=fmt, input_shape=shape, mean=mean, std=std,
        class_count=int(raw["class_count"]) if "class_count" in raw else None, value_range=value_range,
        time_scale=float(raw.get("time_scale", 1.0)),
        beta_min=float(raw.get("beta_min", 0.1)), beta_max=float(raw.get("beta_max", 20.0)),
    )


def _load_weights(m: Manifest):
    if not m.weights.is_file():
        raise ModelLoadError(f"weights file not found: {m.weights}", m.path)
    try:
        if m.format == "torchscript":
            return torch.jit.load(str(m.weights), map_location="cpu").eval()
        ckpt = torch.load(m.weights, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ModelLoadError(f"cannot read weights {m.weights}: {exc}", m.path) from exc
    stored = ckpt.get("input_shape") if isinstance(ckpt, dict) else None
    if stored is not None and tuple(stored) != m.input_shape:
        raise ModelLoadError(
            f"input shape mismatch: manifest declares {m.input_shape}, checkpoint was trained on {tuple(stored)}",
            m.path,
        )
    return ckpt


def _normaliser(m: Manifest):
    mean = torch.tensor(m.mean).view(1, -1, 1, 1)
    std = torch.tensor(m.std).view(1, -1, 1, 1)

    def apply(x_unit):
        x = x_unit * 2 - 1 if m.value_range == "signed" else x_unit
        return (x - mean) / std

    return apply


class ExternalClassifier:
    """Classifier wrapper: takes [0, 1] images, applies the manifest normalisation, returns logits."""

    def __init__(self, module, manifest: Manifest):
        self.module = module
        self.manifest = manifest
        self.class_count = manifest.class_count
        self._norm = _normaliser(manifest)

    def logits(self, x) -> torch.Tensor:
        x = x.data if hasattr(x, "range_tag") else torch.as_tensor(x)
        return self.module(self._norm(x.float()))

    __call__ = logits

    @torch.no_grad()
    def predict(self, X, batch_size=64):
        x = torch.as_tensor(np.asarray(X)) if not isinstance(X, torch.Tensor) else X
        return torch.cat([self.logits(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)]).numpy()

    def accuracy(self, X, y) -> float:
        return 100.0 * float(np.mean(self.predict(X) == np.asarray(y)))


class ExternalScore:
    """Score wrapper around a TorchScript noise predictor ``(x, t) -> eps_hat`` on [-1, 1] images."""

    def __init__(self, module, manifest: Manifest):
        self.module = module
        self.manifest = manifest
        self.schedule = DiffusionSchedule(manifest.beta_min, manifest.beta_max)

    @torch.no_grad()
    def evaluate(self, x, t):
        tb = t if isinstance(t, torch.Tensor) and t.ndim == 1 else torch.full((len(x),), float(t))
        eps = self.module(x.float(), tb.float() * self.manifest.time_scale)
        sigma = torch.sqrt(1 - self.schedule.alpha(tb.double())).float()
        return (-eps / sigma[:, None, None, None]).to(x.dtype)


def _smoke(fn, m: Manifest, expected):
    x = torch.full((1, *m.input_shape), 0.5 if m.kind == "classifier" else 0.0)
    try:
        with torch.no_grad():
            out = fn(x)
    except Exception as exc:
        raise ModelLoadError(f"smoke forward pass failed for input shape {tuple(x.shape)}: {exc}", m.path) from exc
    if tuple(out.shape) != expected:
        raise ModelLoadError(
            f"shape mismatch: expected output {expected} for input {tuple(x.shape)}, got {tuple(out.shape)}", m.path
        )
    if not torch.isfinite(out).all():
        raise ModelLoadError("smoke forward pass produced non-finite outputs", m.path)


def load_external_classifier(manifest_path):
    """Load a classifier described by a manifest and smoke-test it on one grey image."""
    m = read_manifest(manifest_path)
    if m.kind != "classifier":
        raise ModelLoadError(f"manifest kind is {m.kind!r}, expected 'classifier'", m.path)
    obj = _load_weights(m)
    if m.format == "toy":
        try:
            clf = ToyClassifier.from_checkpoint(obj)
        except Exception as exc:
            raise ModelLoadError(f"not a toy classifier checkpoint: {exc}", m.path) from exc
        if clf.n_classes_ != m.class_count:
            raise ModelLoadError(f"class count mismatch: manifest {m.class_count}, checkpoint {clf.n_classes_}", m.path)
        model = ExternalClassifier(clf.module_, m)
    else:
        model = ExternalClassifier(obj, m)
    _smoke(model.logits, m, (1, m.class_count))
    return model


def load_external_score(manifest_path):
    """Load a score model described by a manifest and smoke-test it at ``t = 0.5``."""
    m = read_manifest(manifest_path)
    if m.kind != "score":
        raise ModelLoadError(f"manifest kind is {m.kind!r}, expected 'score'", m.path)
    obj = _load_weights(m)
    if m.format == "toy":
        try:
            model = ScoreNetwork.from_checkpoint(obj)
        except Exception as exc:
            raise ModelLoadError(f"not a toy score checkpoint: {exc}", m.path) from exc
    else:
        model = ExternalScore(obj, m)
    _smoke(lambda x: model.evaluate(x, 0.5), m, (1, *m.input_shape))
    return model
