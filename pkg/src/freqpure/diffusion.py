"""VP-SDE purification: closed-form forward noising and Euler-Maruyama reverse denoising.

Diffusion runs on signed images in [-1, 1]; :func:`purify` converts from and
back to the classifier's [0, 1] range.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InvalidInputError, SolverError
from .validation import ImageBatch, check_images, check_unit_interval_open


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear noise scale ``beta(t) = beta_min + t * (beta_max - beta_min)`` on ``t in [0, 1]``."""

    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if not (self.beta_min > 0 and self.beta_max > 0):
            raise InvalidInputError("beta_min and beta_max must be positive")

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def integral(self, t):
        """``int_0^t beta(s) ds`` in closed form."""
        return self.beta_min * t + (self.beta_max - self.beta_min) * t * t / 2

    def alpha(self, t):
        if isinstance(t, torch.Tensor):
            return torch.exp(-self.integral(t))
        return math.exp(-self.integral(t))


@dataclass(frozen=True)
class PurifyConfig:
    t_star: float = 0.15
    dt: float = 1e-3
    final_step_noiseless: bool = True
    seed: int = 0

    def __post_init__(self):
        check_unit_interval_open(self.t_star, "t_star")
        if not self.dt > 0:
            raise InvalidInputError(f"dt must be positive, got {self.dt}")


@runtime_checkable
class ScoreModel(Protocol):
    def evaluate(self, x: torch.Tensor, t: float) -> torch.Tensor: ...


class GaussianScore:
    """Exact score of ``N(0, I)`` data under the VP-SDE: the marginal stays ``N(0, I)``, so ``s(x, t) = -x``."""

    def evaluate(self, x, t):
        return -x


class ZeroScore:
    def evaluate(self, x, t):
        return torch.zeros_like(x)


def alpha(schedule: DiffusionSchedule, t: float) -> float:
    if not (0.0 <= t <= 1.0):
        raise InvalidInputError(f"t must lie in [0, 1], got {t}")
    return schedule.alpha(t)


def forward_diffuse(x, schedule: DiffusionSchedule, t_star: float, seed: int | None = None,
                    generator: torch.Generator | None = None) -> ImageBatch:
    """Sample ``x(t*) = sqrt(alpha) * x + sqrt(1 - alpha) * eps`` in one shot."""
    x = check_images(x, range_tag="signed", bounded=False)
    check_unit_interval_open(t_star, "t_star")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    a = alpha(schedule, t_star)
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return ImageBatch(math.sqrt(a) * x + math.sqrt(1.0 - a) * eps, "signed")


def reverse_times(t_star: float, dt: float):
    """Start times and step sizes ``(t_k, h_k)`` from ``t*`` down to exactly 0; the last step is shortened."""
    n = max(1, math.ceil(t_star / dt - 1e-9))
    times = [t_star - k * dt for k in range(n)]
    steps = [dt] * (n - 1) + [times[-1]]
    return list(zip(times, steps))


@torch.no_grad()
def reverse_denoise(x_t, schedule: DiffusionSchedule, score: ScoreModel, cfg: PurifyConfig = PurifyConfig(),
                    generator: torch.Generator | None = None, noise: bool = True,
                    callback: Callable | None = None) -> ImageBatch:
    """Integrate the reverse VP-SDE from ``cfg.t_star`` to 0 with Euler-Maruyama.

    Update: ``x <- x + (beta/2 * x + beta * score(x, t)) * h + sqrt(beta * h) * z``.
    ``noise=False`` drops the stochastic term everywhere (probability-free
    deterministic limit); ``cfg.final_step_noiseless`` drops it on the last
    step only. ``callback(k, t_next, x)`` is invoked after every step.
    """
    x = check_images(x_t, range_tag="signed", bounded=False).clone()
    if cfg.dt > cfg.t_star:
        warnings.warn(f"dt={cfg.dt} exceeds t_star={cfg.t_star}; integrating in a single step", stacklevel=2)
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    plan = reverse_times(cfg.t_star, cfg.dt)
    for k, (t, h) in enumerate(plan):
        s = score.evaluate(x, t)
        if not torch.isfinite(s).all():
            raise SolverError(f"score returned non-finite values at t={t:.6g}", t=t)
        b = float(schedule.beta(t))
        x = x + (0.5 * b * x + b * s) * h
        last = k == len(plan) - 1
        if noise and not (last and cfg.final_step_noiseless):
            x = x + math.sqrt(b * h) * torch.randn(x.shape, generator=generator, dtype=x.dtype)
        if callback is not None:
            callback(k, t - h, x)
    return ImageBatch(x, "signed")


def purify(x, schedule: DiffusionSchedule, score: ScoreModel, cfg: PurifyConfig = PurifyConfig(),
           callback: Callable | None = None) -> ImageBatch:
    """Diffuse a [0, 1] batch to ``t*`` and denoise it back; one seeded generator drives both stages."""
    x = check_images(x, range_tag="unit")
    generator = torch.Generator().manual_seed(cfg.seed)
    signed = ImageBatch(x * 2 - 1, "signed").clip()
    diffused = forward_diffuse(signed, schedule, cfg.t_star, generator=generator)
    if callback is not None:
        callback(-1, cfg.t_star, diffused.data)
    out = reverse_denoise(diffused, schedule, score, cfg, generator=generator, callback=callback)
    return out.to_unit().clip()


class DiffusionPurifier(TransformerMixin, BaseEstimator):
    """Scikit-learn style purifier.

    ``fit`` trains the toy score network on ``X`` unless ``score_model`` is
    supplied; ``transform`` purifies a [0, 1] batch with the configured
    timestep. The same ``seed`` always yields the same output.
    """

    def __init__(self, score_model=None, t_star=0.15, dt=1e-3, beta_min=0.1, beta_max=20.0,
                 final_step_noiseless=True, seed=0, epochs=25, width=16, batch_size=128, learning_rate=2e-3):
        self.score_model = score_model
        self.t_star = t_star
        self.dt = dt
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.final_step_noiseless = final_step_noiseless
        self.seed = seed
        self.epochs = epochs
        self.width = width
        self.batch_size = batch_size
        self.learning_rate = learning_rate

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.beta_min, self.beta_max)

    def fit(self, X=None, y=None):
        if self.score_model is not None:
            self.score_model_ = self.score_model
            return self
        if X is None:
            raise InvalidInputError("DiffusionPurifier.fit needs training images when no score_model is given")
        from .models.score import fit_score_network

        self.score_model_ = fit_score_network(
            check_images(X, range_tag="unit"), self.schedule, epochs=self.epochs, seed=self.seed,
            width=self.width, batch_size=self.batch_size, learning_rate=self.learning_rate,
        )
        return self

    def transform(self, X):
        if not hasattr(self, "score_model_"):
            if self.score_model is None:
                from sklearn.exceptions import NotFittedError

                raise NotFittedError("DiffusionPurifier is not fitted and has no score_model")
            self.score_model_ = self.score_model
        cfg = PurifyConfig(self.t_star, self.dt, self.final_step_noiseless, self.seed)
        out = purify(X, self.schedule, self.score_model_, cfg)
        return out.numpy() if isinstance(X, np.ndarray) else out.data
