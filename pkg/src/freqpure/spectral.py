"""Per-channel 2-D DFT helpers: decomposition, Hermitian projection, reconstruction, radial spectra.

Conventions: unnormalised forward DFT and ``1/(H*W)`` inverse (numpy/torch
default), so that ``sum(x**2) == sum(|X|**2) / (H*W)``. Phase lives in
``(-pi, pi]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .exceptions import InvalidInputError
from .validation import ImageBatch, as_tensor, check_images, check_same_shape


@dataclass(frozen=True)
class SpectralDecomposition:
    magnitude: torch.Tensor
    phase: torch.Tensor

    def complex(self) -> torch.Tensor:
        return torch.polar(self.magnitude, self.phase)


class Recomposition(NamedTuple):
    image: ImageBatch
    imag_residual: float


@dataclass(frozen=True)
class SpectrumHistogram:
    """Radially binned log-energy of a batch of perturbations.

    ``radii`` holds the bin centres (normalised frequency radius, in
    ``[0, sqrt(2)/2]``); ``energy`` has one row per batch item.
    """

    radii: np.ndarray
    energy: np.ndarray

    @property
    def bin_count(self) -> int:
        return len(self.radii)

    def mean(self) -> np.ndarray:
        return self.energy.mean(axis=0)

    def save(self, path) -> None:
        rows = np.column_stack([self.radii, self.mean()])
        np.savetxt(path, rows, fmt="%.10g", delimiter="\t", header="radius\tenergy", comments="")

    @classmethod
    def load(cls, path) -> "SpectrumHistogram":
        rows = np.loadtxt(Path(path), skiprows=1, ndmin=2)
        return cls(radii=rows[:, 0], energy=rows[None, :, 1])


def reflect(a: torch.Tensor) -> torch.Tensor:
    """Index point-reflection over the last two axes: ``out[..., u, v] = a[..., -u % H, -v % W]``."""
    return torch.roll(torch.flip(a, dims=(-2, -1)), shifts=(1, 1), dims=(-2, -1))


def decompose(img) -> SpectralDecomposition:
    x = check_images(img, name="img")
    spectrum = torch.fft.fft2(x)
    return SpectralDecomposition(magnitude=spectrum.abs(), phase=torch.angle(spectrum))


def recompose(spec: SpectralDecomposition, range_tag: str = "unit") -> Recomposition:
    """Inverse DFT of ``magnitude * exp(i * phase)``.

    The imaginary part is dropped; its largest absolute value is returned as
    ``imag_residual`` so callers can detect broken conjugate symmetry.
    """
    if (spec.magnitude < 0).any():
        raise InvalidInputError("magnitude must be non-negative")
    out = torch.fft.ifft2(spec.complex())
    residual = out.imag.abs().max().item() if out.numel() else 0.0
    return Recomposition(ImageBatch(out.real, range_tag), residual)


def symmetrize(delta_mag, delta_phase):
    """Project a magnitude field onto even and a phase field onto odd symmetry.

    Both projections are linear and idempotent. Self-conjugate bins (DC and
    the Nyquist row/column for even sizes) end up with zero phase.
    """
    m = as_tensor(delta_mag)
    p = as_tensor(delta_phase)
    if m.ndim != 4:
        raise InvalidInputError(f"delta_mag must be 4-D, got shape {tuple(m.shape)}")
    check_same_shape(m, p, ("delta_mag", "delta_phase"))
    return (m + reflect(m)) / 2, (p - reflect(p)) / 2


def _radius_grid(h: int, w: int) -> np.ndarray:
    fy = np.fft.fftshift(np.fft.fftfreq(h))
    fx = np.fft.fftshift(np.fft.fftfreq(w))
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def radial_spectrum(perturbation, bins: int = 16) -> SpectrumHistogram:
    """Mean of ``log(1 + |F|^2)`` over annuli of uniform width in normalised radius.

    Channels are averaged. Bins that contain no frequency sample (only
    possible when ``bins`` exceeds the grid resolution) report 0.
    """
    if int(bins) < 2:
        raise InvalidInputError(f"bins must be >= 2, got {bins}")
    bins = int(bins)
    x = check_images(perturbation, name="perturbation").to(torch.float64)
    _, _, h, w = x.shape
    power = torch.fft.fftshift(torch.fft.fft2(x), dim=(-2, -1)).abs() ** 2
    energy = torch.log1p(power).mean(dim=1).reshape(x.shape[0], -1).numpy()

    r_max = math.sqrt(2) / 2
    edges = np.linspace(0.0, r_max, bins + 1)
    idx = np.clip(np.digitize(_radius_grid(h, w).ravel(), edges[1:-1]), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    sums = np.stack([np.bincount(idx, weights=row, minlength=bins) for row in energy])
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return SpectrumHistogram(radii=(edges[:-1] + edges[1:]) / 2, energy=means)
