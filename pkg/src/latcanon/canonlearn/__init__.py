"""Latent canonicalization: paths, objectives, training loops and voting."""

from .losses import (
    Batch, LossBreakdown, LossWeights, TrainMode, apply_path, bypass_loss, canon_loss, check_path,
    latent_reg_loss, make_batch, recon_loss, sample_paths, total_loss,
)
from .train import (
    NumericError, TrainLog, accuracy, latents, predict, pretrain, refine_fewshot, select_shots,
)
from .vote import VOTE_SETS, majority_vote_predict, single_path_accuracy, tally, vote_accuracy, vote_paths
