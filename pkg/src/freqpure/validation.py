"""Input validation helpers and the ``ImageBatch`` container.

Most functions in the package accept a numpy array, a torch tensor or an
:class:`ImageBatch`; :func:`as_tensor` normalises all three.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import InvalidInputError

UNIT = "unit"
SIGNED = "signed"
RANGES = {UNIT: (0.0, 1.0), SIGNED: (-1.0, 1.0)}


@dataclass(frozen=True)
class ImageBatch:
    """A batch of images, shape ``(batch, channels, height, width)``, tagged with its value range.

    ``range_tag`` is ``"unit"`` for [0, 1] (classifier convention) or
    ``"signed"`` for [-1, 1] (diffusion convention).
    """

    data: torch.Tensor
    range_tag: str = UNIT

    def __post_init__(self):
        if self.range_tag not in RANGES:
            raise InvalidInputError(f"unknown range_tag {self.range_tag!r}; expected one of {sorted(RANGES)}")
        if not isinstance(self.data, torch.Tensor):
            object.__setattr__(self, "data", torch.as_tensor(np.asarray(self.data)))
        if self.data.ndim != 4:
            raise InvalidInputError(f"ImageBatch data must be 4-D (B, C, H, W), got shape {tuple(self.data.shape)}")

    @property
    def shape(self):
        return tuple(self.data.shape)

    def to_signed(self) -> "ImageBatch":
        if self.range_tag == SIGNED:
            return self
        return ImageBatch(self.data * 2 - 1, SIGNED)

    def to_unit(self) -> "ImageBatch":
        if self.range_tag == UNIT:
            return self
        return ImageBatch((self.data + 1) / 2, UNIT)

    def clip(self) -> "ImageBatch":
        lo, hi = RANGES[self.range_tag]
        return ImageBatch(self.data.clamp(lo, hi), self.range_tag)

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy()


def as_tensor(x, dtype=None) -> torch.Tensor:
    """Return ``x`` as a torch tensor (no copy when already a tensor of the right dtype)."""
    if isinstance(x, ImageBatch):
        x = x.data
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x))
    if dtype is not None:
        x = x.to(dtype)
    elif not torch.is_floating_point(x) and not torch.is_complex(x):
        x = x.to(torch.get_default_dtype())
    return x


def check_images(x, *, range_tag=None, name="x", finite=True, bounded=True) -> torch.Tensor:
    """Validate a 4-D image batch and return it as a floating tensor.

    If ``range_tag`` is given, an :class:`ImageBatch` carrying a different tag
    is rejected outright (this is what prevents silent double scaling), and
    raw arrays must lie inside the corresponding interval unless
    ``bounded=False`` (noised diffusion states are not range-limited).
    """
    if isinstance(x, ImageBatch) and range_tag is not None and x.range_tag != range_tag:
        raise InvalidInputError(
            f"{name} has range_tag {x.range_tag!r} but {range_tag!r} is required; "
            "convert explicitly with to_unit()/to_signed()"
        )
    t = as_tensor(x)
    if t.ndim != 4:
        raise InvalidInputError(f"{name} must be 4-D (batch, channels, height, width), got shape {tuple(t.shape)}")
    if finite and not torch.isfinite(t).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    if bounded and range_tag is not None and not isinstance(x, ImageBatch):
        lo, hi = RANGES[range_tag]
        tol = 1e-6
        if t.numel() and (t.min() < lo - tol or t.max() > hi + tol):
            raise InvalidInputError(
                f"{name} values span [{t.min().item():.4g}, {t.max().item():.4g}], outside the {range_tag} range [{lo}, {hi}]"
            )
    return t


def check_labels(y, n_samples: int, n_classes: int | None = None) -> torch.Tensor:
    t = as_tensor(y, dtype=torch.long) if not isinstance(y, torch.Tensor) else y.long()
    if t.ndim != 1 or t.shape[0] != n_samples:
        raise InvalidInputError(f"labels must be 1-D with {n_samples} entries, got shape {tuple(t.shape)}")
    if n_classes is not None and t.numel() and (t.min() < 0 or t.max() >= n_classes):
        raise InvalidInputError(f"labels must lie in [0, {n_classes}), got range [{t.min().item()}, {t.max().item()}]")
    return t


def check_same_shape(a: torch.Tensor, b: torch.Tensor, names=("a", "b")):
    if tuple(a.shape) != tuple(b.shape):
        raise InvalidInputError(f"shape mismatch: {names[0]} {tuple(a.shape)} vs {names[1]} {tuple(b.shape)}")


def check_unit_interval_open(value: float, name: str):
    if not (0.0 < value < 1.0):
        raise InvalidInputError(f"{name} must lie in the open interval (0, 1), got {value}")
