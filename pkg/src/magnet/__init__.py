"""MAG-Net: multi-kernel, attention-gated encoder/decoder for joint tumour
segmentation and classification, built on a small numpy autodiff core."""

from .model import MAGNet, ModelConfig, count_parameters
from .training import TrainConfig, evaluate, predict, train

__version__ = "0.1.0"

__all__ = ["MAGNet", "ModelConfig", "TrainConfig", "count_parameters", "evaluate", "predict", "train"]
