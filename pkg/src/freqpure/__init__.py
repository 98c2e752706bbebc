"""Fourier magnitude/phase adversarial attacks and VP-SDE diffusion purification."""
from .attack import AttackConfig, AttackTrace, FourierAttack, PerturbationSet, apply_perturbations, attack_loss, run_attack
from .bench import EvalPlan, EvalReport, evaluate_cell, run_sweep
from .diffusion import (DiffusionPurifier, DiffusionSchedule, GaussianScore, PurifyConfig, ScoreModel, forward_diffuse,
                        purify, reverse_denoise)
from .exceptions import AttackError, InvalidInputError, ModelLoadError, SolverError, TrainingError
from .spectral import SpectrumHistogram, decompose, radial_spectrum, recompose, symmetrize
from .validation import ImageBatch

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackTrace", "FourierAttack", "PerturbationSet", "apply_perturbations", "attack_loss", "run_attack",
    "EvalPlan", "EvalReport", "evaluate_cell", "run_sweep",
    "DiffusionPurifier", "DiffusionSchedule", "GaussianScore", "PurifyConfig", "ScoreModel", "forward_diffuse",
    "purify", "reverse_denoise",
    "AttackError", "InvalidInputError", "ModelLoadError", "SolverError", "TrainingError",
    "SpectrumHistogram", "decompose", "radial_spectrum", "recompose", "symmetrize",
    "ImageBatch",
]
