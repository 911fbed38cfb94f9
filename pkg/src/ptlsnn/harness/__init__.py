"""Datasets, configuration, checkpoints and the experiment command line."""

from .checkpoint import Checkpoint, ChecksumError, VersionError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import DenseSTFT, load_mnist_idx, synth_mixture_gen, train_val_split

__all__ = [
    "Checkpoint",
    "ChecksumError",
    "DenseSTFT",
    "ExperimentConfig",
    "VersionError",
    "load_checkpoint",
    "load_config",
    "load_mnist_idx",
    "save_checkpoint",
    "synth_mixture_gen",
    "train_val_split",
]
