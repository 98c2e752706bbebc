"""Small convolutional classifier for the toy dataset, wrapped as a scikit-learn estimator."""
from __future__ import annotations

import hashlib
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from ..exceptions import InvalidInputError, TrainingError
from ..validation import check_images, check_labels
from .data import ToyDatasetSpec, make_toy_dataset

log = logging.getLogger(__name__)

MIN_ACCURACY = 0.60


class ToyCNN(nn.Sequential):
    """Three conv-BN-ReLU stages, global average pooling and a linear head."""

    def __init__(self, channels=3, class_count=10, width=16):
        super().__init__(
            nn.Conv2d(channels, width, 3, padding=1), nn.BatchNorm2d(width), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.BatchNorm2d(2 * width), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 4 * width, 3, padding=1), nn.BatchNorm2d(4 * width), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(4 * width, class_count),
        )


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ToyClassifier(ClassifierMixin, BaseEstimator):
    """Trainable toy classifier.

    Inputs are ``(N, C, H, W)`` images in [0, 1]. After ``fit`` the network is
    frozen in evaluation mode, so :meth:`logits` is deterministic and
    differentiable with respect to its input (what the attack needs).

    ``noise_std > 0`` adds Gaussian noise with a per-image standard deviation
    drawn from U(0, noise_std) to each training batch. This makes the model
    tolerant of the small residual noise left by diffusion purification.
    """

    def __init__(self, width=16, epochs=20, batch_size=128, learning_rate=3e-3, label_smoothing=0.1,
                 noise_std=0.0, class_count=None, seed=0):
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.label_smoothing = label_smoothing
        self.noise_std = noise_std
        self.class_count = class_count
        self.seed = seed

    def _build(self, input_shape, class_count):
        self.input_shape_ = tuple(int(v) for v in input_shape)
        self.n_classes_ = int(class_count)
        self.classes_ = np.arange(self.n_classes_)
        self.module_ = ToyCNN(self.input_shape_[0], self.n_classes_, self.width)

    def fit(self, X, y):
        x = check_images(X, range_tag="unit").float()
        k = self.class_count or int(check_labels(y, len(x)).max()) + 1
        y = check_labels(y, len(x), k)
        if self.epochs < 0:
            raise InvalidInputError(f"epochs must be non-negative, got {self.epochs}")
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self._build(x.shape[1:], k)
            gen = torch.Generator().manual_seed(self.seed)
            opt = torch.optim.Adam(self.module_.parameters(), lr=self.learning_rate)
            self.loss_curve_ = []
            for epoch in range(self.epochs):
                self.module_.train()
                perm = torch.randperm(len(x), generator=gen)
                total = 0.0
                for i in range(0, len(x), self.batch_size):
                    idx = perm[i:i + self.batch_size]
                    xb = x[idx]
                    if self.noise_std > 0:
                        sigma = self.noise_std * torch.rand(len(idx), 1, 1, 1, generator=gen)
                        xb = (xb + sigma * torch.randn(xb.shape, generator=gen)).clamp(0, 1)
                    loss = F.cross_entropy(self.module_(xb), y[idx], label_smoothing=self.label_smoothing)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    total += loss.item() * len(idx)
                self.loss_curve_.append(total / len(x))
                if not np.isfinite(self.loss_curve_[-1]):
                    raise TrainingError(f"classifier loss diverged at epoch {epoch}", self.loss_curve_)
                log.debug("epoch %d loss %.4f", epoch, self.loss_curve_[-1])
        self._freeze()
        return self

    def _freeze(self):
        self.module_.eval()
        for p in self.module_.parameters():
            p.requires_grad_(False)

    def _check_fitted(self):
        if not hasattr(self, "module_"):
            raise NotFittedError("ToyClassifier is not fitted")

    def logits(self, x) -> torch.Tensor:
        """Raw class scores; gradients flow to ``x`` when it requires grad."""
        self._check_fitted()
        x = x.data if hasattr(x, "range_tag") else x
        if not isinstance(x, torch.Tensor):
            x = torch.as_tensor(np.asarray(x))
        return self.module_(x.float())

    __call__ = logits

    @torch.no_grad()
    def predict_proba(self, X, batch_size=512):
        x = check_images(X, range_tag="unit")
        out = [F.softmax(self.logits(x[i:i + batch_size]), dim=1) for i in range(0, len(x), batch_size)]
        return torch.cat(out).numpy() if out else np.zeros((0, self.n_classes_), dtype=np.float32)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def accuracy(self, X, y) -> float:
        """Top-1 accuracy in percent."""
        return 100.0 * float(np.mean(self.predict(X) == np.asarray(y)))

    def weights_hash(self) -> str:
        self._check_fitted()
        return state_hash(self.module_)

    def save(self, path):
        self._check_fitted()
        torch.save({
            "architecture": "toy_cnn",
            "input_shape": list(self.input_shape_),
            "class_count": self.n_classes_,
            "params": self.get_params(),
            "loss_curve": list(self.loss_curve_),
            "state_dict": self.module_.state_dict(),
        }, path)

    @classmethod
    def load(cls, path) -> "ToyClassifier":
        ckpt = torch.load(path, weights_only=True)
        return cls.from_checkpoint(ckpt)

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "ToyClassifier":
        clf = cls(**ckpt["params"])
        clf._build(ckpt["input_shape"], ckpt["class_count"])
        clf.module_.load_state_dict(ckpt["state_dict"])
        clf.loss_curve_ = list(ckpt.get("loss_curve", []))
        clf._freeze()
        return clf


def train_toy_classifier(spec: ToyDatasetSpec = ToyDatasetSpec(), epochs: int = 20, seed: int = 0,
                         dataset=None, **params) -> ToyClassifier:
    """Fit a :class:`ToyClassifier` on the training split of ``spec``.

    Raises :class:`TrainingError` (with the loss curve) when a trained model
    (``epochs > 0``) stays below 60% test accuracy. ``test_accuracy_`` is set
    on the returned estimator.
    """
    spec.validate()
    data = dataset if dataset is not None else make_toy_dataset(spec)
    clf = ToyClassifier(epochs=epochs, seed=seed, class_count=spec.class_count, **params)
    clf.fit(data.x_train, data.y_train)
    clf.test_accuracy_ = clf.accuracy(data.x_test, data.y_test)
    if epochs > 0 and clf.test_accuracy_ < 100 * MIN_ACCURACY:
        raise TrainingError(
            f"toy classifier reached only {clf.test_accuracy_:.1f}% test accuracy (< {100 * MIN_ACCURACY:.0f}%)",
            clf.loss_curve_,
        )
    return clf
