"""Structured synthetic shapes dataset shared by the toy classifier and the toy score network.

Each image is one of ten soft-edged shapes (disk, square, triangle, plus,
ring, horizontal bar, vertical bar, diamond, cross, frame) drawn at a random
position and scale on a tinted background with a faint linear gradient and
pixel noise. The class is the shape.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..exceptions import InvalidInputError

SHAPE_NAMES = ("disk", "square", "triangle", "plus", "ring", "hbar", "vbar", "diamond", "cross", "frame")


@dataclass(frozen=True)
class ToyDatasetSpec:
    image_size: tuple = (3, 32, 32)
    class_count: int = 10
    train_size: int = 10000
    val_size: int = 1000
    test_size: int = 2000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        self.validate()

    def validate(self):
        if len(self.image_size) != 3:
            raise InvalidInputError(f"image_size must be (C, H, W), got {self.image_size}")
        c, h, w = self.image_size
        if c < 1 or h < 8 or w < 8:
            raise InvalidInputError(f"image_size needs C >= 1 and H, W >= 8, got {self.image_size}")
        if not 2 <= self.class_count <= len(SHAPE_NAMES):
            raise InvalidInputError(f"class_count must lie in [2, {len(SHAPE_NAMES)}], got {self.class_count}")
        for name in ("train_size", "val_size", "test_size"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass(frozen=True)
class ToyDataset:
    spec: ToyDatasetSpec
    x_train: torch.Tensor
    y_train: torch.Tensor
    x_val: torch.Tensor
    y_val: torch.Tensor
    x_test: torch.Tensor
    y_test: torch.Tensor

    def split(self, name: str):
        if name not in ("train", "val", "test"):
            raise InvalidInputError(f"unknown split {name!r}")
        return getattr(self, f"x_{name}"), getattr(self, f"y_{name}")


def _shape_field(k: int, dx, dy):
    """Signed distance-like field of shape ``k`` (negative inside, in units of the shape radius)."""
    ax, ay = np.abs(dx), np.abs(dy)
    rad = np.sqrt(dx**2 + dy**2)
    w = 0.3
    if k == 0:
        return rad - 1.0
    if k == 1:
        return np.maximum(ax, ay) - 0.85
    if k == 2:
        return np.maximum(dy * 0.5 + ax * 0.9 - 0.45, -dy - 0.7)
    if k == 3:
        return np.minimum(np.maximum(ax - w, ay - 1), np.maximum(ay - w, ax - 1))
    if k == 4:
        return np.abs(rad - 0.75) - 0.22
    if k == 5:
        return np.maximum(ax - 1.0, ay - w)
    if k == 6:
        return np.maximum(ay - 1.0, ax - w)
    if k == 7:
        return ax + ay - 1.1
    if k == 8:
        return np.minimum(np.maximum(np.abs(dx - dy) / np.sqrt(2) - 0.8 * w, rad - 1.1),
                          np.maximum(np.abs(dx + dy) / np.sqrt(2) - 0.8 * w, rad - 1.1))
    return np.abs(np.maximum(ax, ay) - 0.75) - 0.18


def render_shapes(labels: np.ndarray, image_size=(3, 32, 32), rng: np.random.Generator | None = None) -> np.ndarray:
    """Render one image per label as float32 in [0, 1]."""
    rng = np.random.default_rng() if rng is None else rng
    c, h, w = image_size
    n = len(labels)
    scale = min(h, w) / 32.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    cx = rng.uniform(w / 2 - 5 * scale, w / 2 + 5 * scale, n)[:, None, None]
    cy = rng.uniform(h / 2 - 5 * scale, h / 2 + 5 * scale, n)[:, None, None]
    r = rng.uniform(6 * scale, 9.5 * scale, n)[:, None, None]
    dx = (xx[None] - cx) / r
    dy = (yy[None] - cy) / r
    field = np.empty_like(dx)
    for k in np.unique(labels):
        sel = labels == k
        field[sel] = _shape_field(int(k), dx[sel], dy[sel])
    mask = 1.0 / (1.0 + np.exp(np.clip(field * r / (0.6 * scale), -50, 50)))
    fg = rng.uniform(0.55, 1.0, (n, c, 1, 1))
    bg = rng.uniform(0.0, 0.4, (n, c, 1, 1))
    gx = rng.normal(0, 0.08, (n, 1, 1, 1)) * (xx / w - 0.5)
    gy = rng.normal(0, 0.08, (n, 1, 1, 1)) * (yy / h - 0.5)
    img = bg + gx + gy + (fg - bg) * mask[:, None]
    img = img + rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def make_toy_dataset(spec: ToyDatasetSpec = ToyDatasetSpec()) -> ToyDataset:
    """Generate train/val/test splits from one seeded stream.

    Labels are class-balanced within each split (up to remainder). The three
    splits are consecutive slices of a single draw, so no sample is shared.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sizes = (spec.train_size, spec.val_size, spec.test_size)
    labels = [rng.permutation(np.arange(n) % spec.class_count) for n in sizes]
    images = render_shapes(np.concatenate(labels), spec.image_size, rng)
    out, start = [], 0
    for n, y in zip(sizes, labels):
        out += [torch.from_numpy(images[start:start + n]), torch.from_numpy(y.astype(np.int64))]
        start += n
    return ToyDataset(spec, *out)
