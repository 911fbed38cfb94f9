"""Minimal numpy engine for pre-training the analog networks."""

from .layers import BatchNorm, ConfigError, Conv2d, Dense, Layer, ReLU, ShapeError, StateError, relu_apply
from .losses import cross_entropy, loss_eval, mse, sigmoid, sigmoid_mse
from .net import AnalogNet, format_architecture, parse_architecture
from .optim import Adam, AdamState, StepDecay, adam_step, lr_schedule
from .train import evaluate_loss, train_analog

__all__ = [
    "Adam",
    "AdamState",
    "AnalogNet",
    "BatchNorm",
    "ConfigError",
    "Conv2d",
    "Dense",
    "Layer",
    "ReLU",
    "ShapeError",
    "StateError",
    "StepDecay",
    "adam_step",
    "cross_entropy",
    "evaluate_loss",
    "format_architecture",
    "loss_eval",
    "lr_schedule",
    "mse",
    "parse_architecture",
    "relu_apply",
    "sigmoid",
    "sigmoid_mse",
    "train_analog",
]
