"""Adversarial-training lab: per-example quality profiling, quality-driven
pruning and gap metrics for robust overfitting, robustness overestimation
and the robustness-accuracy trade-off."""
from .attacks import (AttackConfig, AttackOutcome, fgsm, min_perturbation, pgd, pgd_multi_restart,
                      square_patch_attack, transfer_attack)
from .backend import NAME as BACKEND
from .datasets import (Dataset, SyntheticSpec, class_balanced_halves, generate_synthetic,
                       load_delimited, remove_fraction, save_delimited, stratified_split)
from .experiments import (GapReport, RunResult, compute_gaps, half_split_demo, overestimation_eval,
                          removal_curve, train_run)
from .nn import Network, TrainConfig, backward, forward, mlp
from .objectives import (ObjectiveConfig, gairat_loss, mart_loss, pgd_at_loss, standard_loss,
                         trades_loss)
from .profiler import QualityRanking, ensemble_rank, quality_rank, stability
from .stats import permutation_test, spearman

__version__ = "0.1.0"
