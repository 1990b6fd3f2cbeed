"""Mixture-of-experts transformer for synthetic voice-pathology detection,
trained with group-relative policy optimisation, PPO or cross-entropy."""

from .data import GenConfig, VoiceSample, generate, read_csv, split_standardize, threshold_label, write_csv
from .metrics import EvalResult, accuracy, evaluate, f1, roc_auc
from .model import MoeModel, MoeModelConfig, init, load, save
from .trainers import GrpoConfig, StepTrace, ce_step, grpo_step, ppo_step, train

__version__ = "0.1.0"
