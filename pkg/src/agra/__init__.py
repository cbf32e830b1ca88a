"""Adaptive gradient-based outlier removal for linear classifiers on noisy labels."""

from .data import Dataset, NoiseKind, NoiseSpec, TaskKind, inject_noise, load_dataset, split_dataset, tfidf_featurize, write_dataset
from .filtering import Decision, FilterConfig, SamplerMode, decide_single, decide_single_alt, filter_batch_multi, filter_batch_single, sample_comparison_batch, similarity
from .losses import Batch, LossKind, loss_gradient, loss_value
from .metrics import accuracy, f1_scores, macro_auroc
from .model import AdamState, FlatGradient, LinearModel, adam_step, flatten_params, forward, unflatten
from .trainer import TrainConfig, audit_summary, evaluate, train

__version__ = "0.1.0"
