"""Long-term spatial prompt tuning on a small frozen Vision Transformer."""

from .autodiff import Graph, Tensor, grad_check
from .backbone import ViTConfig, init_backbone, load_weights, save_weights
from .prompts import (
    PromptBank,
    StrategyKind,
    init_bank,
    load_bank,
    lspt_forward,
    param_partition,
    save_bank,
)

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "Tensor",
    "grad_check",
    "ViTConfig",
    "init_backbone",
    "load_weights",
    "save_weights",
    "PromptBank",
    "StrategyKind",
    "init_bank",
    "load_bank",
    "lspt_forward",
    "param_partition",
    "save_bank",
]
