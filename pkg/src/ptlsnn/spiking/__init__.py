"""Integrate-and-fire simulation: kernels, neuron dynamics, coding, and layer runners."""

from .core import (
    IFParams,
    MembraneState,
    SpikeTrain,
    dump_raster,
    encode_activations,
    free_aggregate_potential,
    if_step,
    load_raster,
    record_synaptic_events,
    run_layer_window,
    simulate_currents,
)
from .kernels import BACKEND, available_backends
from .network import ContractError, SpikingLayer, SpikingNet, SpikingRecord

__all__ = [
    "BACKEND",
    "ContractError",
    "IFParams",
    "MembraneState",
    "SpikeTrain",
    "SpikingLayer",
    "SpikingNet",
    "SpikingRecord",
    "available_backends",
    "dump_raster",
    "encode_activations",
    "free_aggregate_potential",
    "if_step",
    "load_raster",
    "record_synaptic_events",
    "run_layer_window",
    "simulate_currents",
]
