"""Dual-mode automatic differentiation over a small layer set."""

from dpjl.autodiff.checkpoint import load_checkpoint, save_checkpoint
from dpjl.autodiff.layers import Activation, Dense, Embedding, Layer, SimpleRNN, layer_from_config
from dpjl.autodiff.model import (
    LOSSES,
    Model,
    ParamVector,
    PassCounters,
    Segment,
    forward_losses,
    grad_weighted_loss,
    jvp_losses,
    per_sample_grads,
    predict,
)

__all__ = [
    "Activation", "Dense", "Embedding", "Layer", "SimpleRNN", "layer_from_config",
    "LOSSES", "Model", "ParamVector", "PassCounters", "Segment",
    "forward_losses", "grad_weighted_loss", "jvp_losses", "per_sample_grads", "predict",
    "save_checkpoint", "load_checkpoint",
]
