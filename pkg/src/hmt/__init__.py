"""Hierarchical segment-level memory for a small causal transformer, on a NumPy autodiff engine."""
from .backbone import Backbone, BackboneConfig
from .memory import HmtConfig, HmtModel, MemoryCache
from .recurrence import TrainConfig, Trainer, bptt_unroll, lr_at

__version__ = "0.1.0"
__all__ = ["Backbone", "BackboneConfig", "HmtConfig", "HmtModel", "MemoryCache", "TrainConfig",
           "Trainer", "bptt_unroll", "lr_at"]
