"""Evidential semantic segmentation with Dirichlet beliefs, at desk scale."""

from .dirichlet_core import belief_maps, digamma, log_gamma, trigamma
from .losses import AnnealSchedule, LossWeights, kl_weight, total_loss
from .nn_engine import SegNet, SegNetConfig, TrainConfig, load_checkpoint, predict, save_checkpoint, train
from .synthetic_data import DatasetConfig, generate_dataset, load_dataset

__version__ = "0.1.0"
