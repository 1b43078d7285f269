"""Residual networks with auxiliary classifier heads, trained by plain,
joint, pair-wise or multi-path backpropagation, on a numpy core."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .inference import entropy, evaluate_heads, safe_predict
from .instrumentation import supervision_ratio
from .network import ConfigError, Model, ModelConfig, backward, build_model, forward, head_weights, truncate
from .training import STRATEGIES, OptimConfig, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "Model", "ModelConfig", "OptimConfig", "STRATEGIES",
    "backward", "build_model", "entropy", "evaluate_heads", "forward", "head_weights",
    "load_checkpoint", "safe_predict", "save_checkpoint", "supervision_ratio", "train", "truncate",
]
