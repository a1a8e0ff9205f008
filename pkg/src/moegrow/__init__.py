"""Desk-scale toolkit for growing MoE transformer checkpoints."""

from .checkpoint import Checkpoint, ModelConfig
from .corpus import CorpusSpec, batch_iter, entropy_rate, gen_corpus
from .growth import DepthPlan, WidthPlan, grow_depth, grow_width, inject_noise
from .model import forward, init_model
from .store import load, save
from .tensor import GradTape, Tensor
from .training import TrainSchedule, adamw_step, evaluate, flops_per_token, lr_at, train_run

__all__ = [
    "Checkpoint", "ModelConfig", "CorpusSpec", "batch_iter", "entropy_rate",
    "gen_corpus", "DepthPlan", "WidthPlan", "grow_depth", "grow_width",
    "inject_noise", "forward", "init_model", "load", "save", "GradTape",
    "Tensor", "TrainSchedule", "adamw_step", "evaluate", "flops_per_token",
    "lr_at", "train_run",
]

__version__ = "0.1.0"
