"""Desk-scale transformer training engine.

Fused forward/backward kernels with analytic gradients, a single-buffer
fp16 parameter workspace for batched optimizer updates, a lifetime-based
static memory planner, and an independent float64 oracle to check it all
against.
"""

from .config import RunConfig
from .engine import TrainingEngine
from .model import Batch, ModelConfig, Transformer, transformer_forward_backward
from .trainer import OptimConfig, Workspace, workspace_pack

__version__ = "0.1.0"

__all__ = ["Batch", "ModelConfig", "OptimConfig", "RunConfig", "TrainingEngine",
           "Transformer", "Workspace", "transformer_forward_backward",
           "workspace_pack"]
