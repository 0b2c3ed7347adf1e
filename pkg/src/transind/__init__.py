"""Joint transductive/inductive few-shot nuclei segmentation."""

from .config import (DataConfig, MetricConfig, ModelConfig, RunConfig, StageConfig,
                     TrainConfig, load_config)
from .checkpoint import Checkpoint, build_model, set_deterministic
from .model import JointModel

__all__ = [
    "Checkpoint", "DataConfig", "JointModel", "MetricConfig", "ModelConfig", "RunConfig",
    "StageConfig", "TrainConfig", "build_model", "load_config", "set_deterministic",
]
__version__ = "0.1.0"
