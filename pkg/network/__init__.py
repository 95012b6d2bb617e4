"""Numpy 3D U-Net stages, the three-stage cascade, Adam/EMA and checkpoints."""
from network.cascade import CascadeModel, backward_and_step, cascade_batch_loss, cascade_forward, ema_model
from network.checkpoint import load_ensemble, read_checkpoint, write_checkpoint
from network.optim import OptimizerState
from network.stage import StageArch, StageModel, stage_forward

__all__ = [
    "CascadeModel",
    "OptimizerState",
    "StageArch",
    "StageModel",
    "backward_and_step",
    "cascade_batch_loss",
    "cascade_forward",
    "ema_model",
    "load_ensemble",
    "read_checkpoint",
    "stage_forward",
    "write_checkpoint",
]
