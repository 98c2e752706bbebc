"""On-disk formats: the ``.npz`` batch container and lossless PNG exports.

A batch file holds ``data`` (float32, N x C x H x W), ``labels`` (int64),
and scalar metadata ``range_tag``, ``mode``, ``seed`` and ``config_hash``.
Writes go through a temporary file and an atomic rename.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import InvalidInputError
from .validation import RANGES, ImageBatch

MAGNIFY = 20.0


def _atomic_write(path: Path, writer):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=path.suffix + ".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def save_batch(path, batch: ImageBatch, labels=None, *, mode="", seed=0, config_hash="", **extra) -> Path:
    if not isinstance(batch, ImageBatch):
        raise InvalidInputError("save_batch expects an ImageBatch so that the range tag is recorded")
    path = Path(path)
    labels = np.zeros(0, np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    arrays = dict(data=batch.numpy().astype(np.float32), labels=labels, range_tag=np.array(batch.range_tag),
                  mode=np.array(mode), seed=np.array(int(seed)), config_hash=np.array(config_hash))
    arrays.update({k: np.asarray(v) for k, v in extra.items()})

    def write(tmp):
        with open(tmp, "wb") as fh:
            np.savez_compressed(fh, **arrays)

    _atomic_write(path, write)
    return path


def load_batch(path):
    """Return ``(ImageBatch, labels, metadata)``."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"batch file not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if "data" not in z or "range_tag" not in z:
            raise InvalidInputError(f"{path} is not a batch file (missing data/range_tag)")
        tag = str(z["range_tag"])
        if tag not in RANGES:
            raise InvalidInputError(f"{path} has unknown range_tag {tag!r}")
        meta = {k: z[k].item() if z[k].ndim == 0 else z[k] for k in z.files if k not in ("data", "labels")}
        return ImageBatch(z["data"], tag), z["labels"], meta


def to_uint8(img: np.ndarray) -> np.ndarray:
    """CHW float in [0, 1] to HWC (or HW) uint8."""
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else np.transpose(arr, (1, 2, 0))


def export_png(img: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")
    return path


def magnify_perturbation(delta: np.ndarray, factor: float = MAGNIFY) -> np.ndarray:
    """Map a signed perturbation to a viewable [0, 1] image: ``0.5 + factor * delta``, clipped."""
    return np.clip(0.5 + factor * np.asarray(delta), 0.0, 1.0)


def export_images(batch, directory, prefix, unit_from_signed=False):
    """One PNG per sample: ``<directory>/<prefix>_<index>.png``."""
    data = batch.numpy() if isinstance(batch, ImageBatch) else np.asarray(batch)
    if unit_from_signed:
        data = (data + 1) / 2
    return [export_png(img, Path(directory) / f"{prefix}_{i:04d}.png") for i, img in enumerate(data)]
