"""Toy classifier, toy score network and adapters for external checkpoints."""
from .classifier import ToyClassifier, ToyCNN, train_toy_classifier
from .data import ToyDataset, ToyDatasetSpec, make_toy_dataset, render_shapes
from .external import load_external_classifier, load_external_score, read_manifest
from .score import ScoreNetwork, SmallUNet, denoising_loss, fit_score_network, train_toy_score_model

__all__ = [
    "ToyCNN", "ToyClassifier", "train_toy_classifier",
    "ToyDataset", "ToyDatasetSpec", "make_toy_dataset", "render_shapes",
    "ScoreNetwork", "SmallUNet", "denoising_loss", "fit_score_network", "train_toy_score_model",
    "load_external_classifier", "load_external_score", "read_manifest",
]
