"""Dual-stream cross-attention survival model over dual-resolution token bags."""

from .autodiff import Tape, Tensor, grad_check
from .data import (Cohort, CohortSplit, PatientBag, SynthConfig,
                   canonical_order, discretize_coordinates,
                   generate_synthetic_cohort, load_bag, load_cohort,
                   random_bag, save_bag, save_cohort, split_folds)
from .network import (DscaConfig, DscaParams, count_parameters,
                      cross_attention_pool, embed_high, embed_low, forward,
                      fuse, global_attention_pool, mean_square_pool, predict,
                      predict_hazards, sparse_pe, transformer_encode)
from .survival import (HazardPrediction, KmCurve, TimeBins, assign_bin,
                       concordance_index, kaplan_meier, logrank_test,
                       make_time_bins, nll_loss, risk_score,
                       stratify_by_median, survival_from_hazards)
from .training import (TrainConfig, TrainReport, adam_step, bag_nll,
                       cross_validate, gradient_check_report, run_ablation,
                       train_fold)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
