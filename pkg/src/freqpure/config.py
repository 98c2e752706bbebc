"""Run configuration: one file (YAML or JSON) covering data, training, attack, purification and evaluation.

The canonical serialisation (sorted JSON of every field that influences
results) is hashed to name artifacts. ``output_dir`` and ``workers`` change
where and how fast things run, not what is computed, so they are excluded.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .attack import AttackConfig
from .bench import EvalPlan
from .diffusion import DiffusionSchedule, PurifyConfig
from .exceptions import InvalidInputError
from .models.data import ToyDatasetSpec


@dataclass(frozen=True)
class TrainConfig:
    classifier_epochs: int = 12
    classifier_width: int = 16
    classifier_noise: float = 0.05
    score_epochs: int = 20
    score_width: int = 32
    score_batch_size: int = 128
    score_learning_rate: float = 2e-3

    def __post_init__(self):
        if self.classifier_epochs < 0 or self.score_epochs < 1:
            raise InvalidInputError("classifier_epochs must be >= 0 and score_epochs >= 1")


# Toy-scale defaults. The attack keeps the reference optimiser settings but a
# smaller distortion weight and an iteration cap, purification uses a shorter
# horizon, and evaluation uses smaller subsets than the full-scale protocol,
# so that training plus a whole evaluation fits in about half an hour on one CPU.
TOY_ATTACK = AttackConfig(lambda_=2e3, max_iterations=300)
TOY_PLAN = EvalPlan(subset_size=128, t_star_list=(0.1,))


@dataclass(frozen=True)
class RunConfig:
    dataset: ToyDatasetSpec = ToyDatasetSpec()
    train: TrainConfig = TrainConfig()
    attack: AttackConfig = TOY_ATTACK
    purify: PurifyConfig = PurifyConfig(t_star=0.1)
    schedule: DiffusionSchedule = DiffusionSchedule()
    eval: EvalPlan = TOY_PLAN
    output_dir: str = "runs"
    workers: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else asdict(v) if hasattr(v, "__dataclass_fields__") else v
        return out

    def canonical(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.hash()

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw or {})
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidInputError(f"unknown config sections {sorted(unknown)}")
        sections = {"dataset": ToyDatasetSpec, "train": TrainConfig, "attack": AttackConfig,
                    "purify": PurifyConfig, "schedule": DiffusionSchedule, "eval": EvalPlan}
        base = cls()
        kwargs = {}
        for name, typ in sections.items():
            if name in raw:
                section = raw.pop(name) or {}
                if not isinstance(section, dict):
                    raise InvalidInputError(f"config section {name!r} must be a mapping")
                allowed = {f.name for f in fields(typ)}
                bad = set(section) - allowed
                if bad:
                    raise InvalidInputError(f"unknown keys {sorted(bad)} in config section {name!r}")
                try:
                    kwargs[name] = replace(getattr(base, name), **section)
                except TypeError as exc:
                    raise InvalidInputError(f"invalid config section {name!r}: {exc}") from exc
        kwargs.update(raw)
        return replace(base, **kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise InvalidInputError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise InvalidInputError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
