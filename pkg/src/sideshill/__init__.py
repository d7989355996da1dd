"""Side-feature-aware fake profile generation for shilling attacks on recommenders.

Modules: :mod:`.data` (loading, templates, injection), :mod:`.generator`
(FiLM-conditioned VAE and AE generators), :mod:`.critics` (projection and
spectrally normalised critics), :mod:`.surrogate` (differentiable surrogates
and the unrolled promotion attack), :mod:`.victims` (recommenders retrained on
poisoned data), :mod:`.evaluation` (hit ratio and stealth metrics) and
:mod:`.pipeline` (experiment orchestration).
"""
from .data import (Dataset, ProfileBatch, RatingMatrix, SideFeatureTable, TemplateSet, cluster_friendliness,
                   inject, load_dataset, sample_templates)
from .evaluation import (MetricsReport, ecod_auroc, ecod_scores, evaluate_round, fap_detect, hit_ratio_at_k,
                         rating_divergences)
from .generator import Generator, generate, pretrain
from .pipeline import ExperimentConfig, run_ablation, run_experiment, run_single
from .surrogate import AttackConfig, fit_surrogate_offline, fit_wrmf, push_loss, unrolled_attack_step
from .victims import VictimModel, train_victim

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "Dataset", "ExperimentConfig", "Generator", "MetricsReport", "ProfileBatch",
    "RatingMatrix", "SideFeatureTable", "TemplateSet", "VictimModel", "cluster_friendliness", "ecod_auroc",
    "ecod_scores", "evaluate_round", "fap_detect", "fit_surrogate_offline", "fit_wrmf", "generate",
    "hit_ratio_at_k", "inject", "load_dataset", "pretrain", "push_loss", "rating_divergences", "run_ablation",
    "run_experiment", "run_single", "sample_templates", "train_victim", "unrolled_attack_step",
]
