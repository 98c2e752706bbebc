"""Small U-Net noise predictor trained by denoising score matching.

The network predicts the noise ``eps`` in ``x_t = sqrt(alpha_t) x_0 + sqrt(1 - alpha_t) eps``
and the score is recovered as ``-eps_hat / sqrt(1 - alpha_t)``. Images are
handled in the signed [-1, 1] convention used by the diffusion code.
"""
from __future__ import annotations

import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..diffusion import DiffusionSchedule, ScoreModel
from ..exceptions import InvalidInputError, TrainingError
from ..validation import ImageBatch, SIGNED, check_images
from .classifier import state_hash
from .data import ToyDatasetSpec, make_toy_dataset

log = logging.getLogger(__name__)

T_MIN = 1e-3


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = (t.float()[:, None] * 1000.0) * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x))) + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SmallUNet(nn.Module):
    """Two-resolution U-Net on a space-to-depth input.

    The image is folded 2x2 into channels first (``pixel_unshuffle``), which
    keeps the convolutions cheap at 32x32 without discarding information.
    ``width`` must be a multiple of 8 (group norm).
    """

    def __init__(self, channels=3, width=16):
        super().__init__()
        if width % 8:
            raise InvalidInputError(f"width must be a multiple of 8, got {width}")
        tdim = 4 * width
        self.width = width
        self.time = nn.Sequential(nn.Linear(width, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.inp = nn.Conv2d(4 * channels, width, 3, padding=1)
        self.enc = ResBlock(width, width, tdim)
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * width, 2 * width, tdim)
        self.mid2 = ResBlock(2 * width, 2 * width, tdim)
        self.dec = ResBlock(3 * width, width, tdim)
        self.out = nn.Sequential(nn.GroupNorm(8, width), nn.SiLU(), nn.Conv2d(width, 4 * channels, 3, padding=1))

    def forward(self, x, t):
        temb = self.time(timestep_embedding(t, self.width))
        skip = self.enc(self.inp(F.pixel_unshuffle(x, 2)), temb)
        h = self.mid2(self.mid1(self.down(skip), temb), temb)
        h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
        h = self.dec(torch.cat([h, skip], dim=1), temb)
        return F.pixel_shuffle(self.out(h), 2)


def _time_batch(t, n) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        return t
    return torch.full((n,), float(t))


class ScoreNetwork:
    """:class:`ScoreModel` backed by a noise-prediction network."""

    def __init__(self, net: nn.Module, schedule: DiffusionSchedule = DiffusionSchedule(), loss_curve=None):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.schedule = schedule
        self.loss_curve = list(loss_curve or [])

    @torch.no_grad()
    def predict_noise(self, x, t) -> torch.Tensor:
        x = torch.as_tensor(x).float()
        return self.net(x, _time_batch(t, len(x)))

    def evaluate(self, x, t) -> torch.Tensor:
        tb = _time_batch(t, len(x))
        sigma = torch.sqrt(1 - self.schedule.alpha(tb.double())).float()
        return (-self.predict_noise(x, tb) / sigma[:, None, None, None]).to(x.dtype)

    def weights_hash(self) -> str:
        return state_hash(self.net)

    def save(self, path, input_shape=None):
        torch.save({
            "architecture": "small_unet",
            "channels": self.net.inp.in_channels // 4,
            "width": self.net.width,
            "input_shape": list(input_shape) if input_shape else None,
            "beta_min": self.schedule.beta_min,
            "beta_max": self.schedule.beta_max,
            "loss_curve": self.loss_curve,
            "state_dict": self.net.state_dict(),
        }, path)

    @classmethod
    def load(cls, path) -> "ScoreNetwork":
        return cls.from_checkpoint(torch.load(path, weights_only=True))

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "ScoreNetwork":
        net = SmallUNet(ckpt["channels"], ckpt["width"])
        net.load_state_dict(ckpt["state_dict"])
        return cls(net, DiffusionSchedule(ckpt["beta_min"], ckpt["beta_max"]), ckpt.get("loss_curve"))


def noise_batch(x0: torch.Tensor, schedule: DiffusionSchedule, generator: torch.Generator, t_min=T_MIN, t_max=1.0):
    """Draw ``t ~ U(t_min, t_max)`` and ``eps ~ N(0, I)`` and form ``x_t``."""
    t = torch.rand(len(x0), generator=generator) * (t_max - t_min) + t_min
    eps = torch.randn(x0.shape, generator=generator)
    a = schedule.alpha(t)[:, None, None, None]
    return a.sqrt() * x0 + (1 - a).sqrt() * eps, t, eps


def denoising_loss(score: ScoreModel, x0, schedule: DiffusionSchedule = DiffusionSchedule(), seed=0,
                   draws=1, batch_size=512, t_min=T_MIN) -> float:
    """Noise-prediction DSM loss of any score model on signed data ``x0``.

    ``eps_hat = -sqrt(1 - alpha_t) * s(x_t, t)``; the loss is the mean squared
    error against the true noise. A zero score scores ``E|eps|^2 = 1``.
    """
    x0 = check_images(x0, range_tag=SIGNED, bounded=False)
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for _ in range(draws):
        for i in range(0, len(x0), batch_size):
            xt, t, eps = noise_batch(x0[i:i + batch_size], schedule, gen, t_min)
            sigma = torch.sqrt(1 - schedule.alpha(t))[:, None, None, None]
            eps_hat = -sigma * score.evaluate(xt, t)
            total += F.mse_loss(eps_hat, eps, reduction="sum").item()
            count += eps.numel()
    return total / count


def _signed(X) -> torch.Tensor:
    if isinstance(X, ImageBatch):
        return X.to_signed().data.float()
    return check_images(X, range_tag="unit").float() * 2 - 1


def fit_score_network(X, schedule: DiffusionSchedule = DiffusionSchedule(), epochs=25, seed=0, width=16,
                      batch_size=128, learning_rate=2e-3, t_min=T_MIN) -> ScoreNetwork:
    """Train a :class:`SmallUNet` by denoising score matching.

    ``X`` is a [0, 1] batch, or an :class:`ImageBatch` (a signed batch is
    used as is). One epoch is ``ceil(N / batch_size)`` optimiser steps with
    freshly drawn ``(t, eps)`` per step; the learning rate follows a
    one-cycle schedule. Divergence (non-finite loss, or a running loss far
    above its starting value) raises :class:`TrainingError`.
    """
    x = _signed(X)
    if epochs < 1:
        raise InvalidInputError(f"epochs must be >= 1, got {epochs}")
    steps_per_epoch = math.ceil(len(x) / batch_size)
    total_steps = epochs * steps_per_epoch
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = SmallUNet(x.shape[1], width)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, learning_rate, total_steps=total_steps, pct_start=0.05)
    curve, first = [], None
    net.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        running = 0.0
        for i in range(0, len(x), batch_size):
            xt, t, eps = noise_batch(x[perm[i:i + batch_size]], schedule, gen, t_min)
            loss = F.mse_loss(net(xt, t), eps)
            if not torch.isfinite(loss):
                raise TrainingError(f"score-matching loss became non-finite in epoch {epoch}", curve)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item() * len(xt)
        curve.append(running / len(x))
        first = curve[0] if first is None else first
        if curve[-1] > 10 * max(first, 1.0):
            raise TrainingError(f"score-matching loss diverged ({curve[-1]:.3g}) in epoch {epoch}", curve)
        log.debug("epoch %d dsm loss %.4f", epoch, curve[-1])
    return ScoreNetwork(net, schedule, curve)


def train_toy_score_model(spec: ToyDatasetSpec = ToyDatasetSpec(), schedule: DiffusionSchedule = DiffusionSchedule(),
                          epochs: int = 25, seed: int = 0, dataset=None, **params) -> ScoreNetwork:
    """Fit a score network on the training split of the toy dataset."""
    spec.validate()
    data = dataset if dataset is not None else make_toy_dataset(spec)
    return fit_score_network(data.x_train, schedule, epochs=epochs, seed=seed, **params)
