"""Similarity-weighted ensembles of participant-specific convolutional networks
for training-free SSVEP target identification, with CCA-family baselines,
synthetic cohorts and a leave-one-participant-out evaluation harness."""
from .baselines import cca_classify, fbcca_classify, ttcca_classify
from .bundles import (ModelBundle, import_matrix_dump, load_cohort, load_model, save_cohort,
                      save_model)
from .ensemble import EnsembleDecision, classify_instance, decide, dynamic_select, weighted_vote
from .evaluation import EvalConfig, MetricsRow, bonferroni, itr, loo_evaluate, paired_ttest
from .kernels import BACKEND
from .network import (Architecture, NetworkWeights, TrainingConfig, fine_tune_all, forward,
                      init_weights, predict, train_global)
from .signal import (CohortDataset, DegenerateInputError, FilterBankConfig, FilteredEpoch,
                     ParticipantRecords, RawEpoch, SpellerLayout, apply_filter_bank,
                     canonical_correlation, fit_harmonic_combination, make_reference_signal,
                     pearson)
from .similarity import TemplateBank, build_templates, rank_participants
from .synth import SynthParams, generate_cohort, generate_instance

__version__ = "0.1.0"
