"""Bayesian active learning with hybrid density/diversity batch selection."""

from .data import PhantomConfig, PoolState, SampleKey, Volume, generate_phantom, move_to_training, split_pools
from .metrics import dice, mean_dice, rac
from .model import Classifier, TrainConfig, focal_loss, predict_deterministic, predict_mc, train
from .represent import HybridConfig, cosine_similarity, greedy_hybrid_select, mutual_information, pairwise_matrices
from .uncertainty import class_uncertainty, select_candidates

__version__ = "0.1.0"
