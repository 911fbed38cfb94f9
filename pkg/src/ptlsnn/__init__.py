"""Spike-count ANN-to-SNN conversion with progressive tandem learning."""

__version__ = "0.1.0"
