"""Bonnet: desk-scale semantic segmentation training and deployment."""

from .autodiff import Tape, backward, checkpointed_backward
from .config import (AugmentSpec, DataConfig, NetConfig, NodesConfig,
                     TrainConfig, load_config, save_config)
from .container import FrozenModel, read_frozen, write_frozen
from .dataset import Sample, StandardDataset, augment, import_dataset, prefetch_epoch
from .freezer import fold_batch_norm, freeze, quantize_model, strip_training_ops
from .metrics import ConfusionMatrix, Metrics, class_weights, metrics
from .model import (LossSpec, ModelGraph, build_architecture, loss,
                    run_inference, softmax_argmax)
from .runtime import Mask, Session, colorize, infer, open_session
from .tensor import DType, Layout, QuantParams, Tensor, convert_layout
from .trainer import (TrainLog, average_gradients, evaluate, fit,
                      load_checkpoint, save_checkpoint, train_step)

__version__ = "0.1.0"

__all__ = [
    "Tape", "backward", "checkpointed_backward",
    "AugmentSpec", "DataConfig", "NetConfig", "NodesConfig", "TrainConfig",
    "load_config", "save_config",
    "FrozenModel", "read_frozen", "write_frozen",
    "Sample", "StandardDataset", "augment", "import_dataset", "prefetch_epoch",
    "fold_batch_norm", "freeze", "quantize_model", "strip_training_ops",
    "ConfusionMatrix", "Metrics", "class_weights", "metrics",
    "LossSpec", "ModelGraph", "build_architecture", "loss", "run_inference",
    "softmax_argmax",
    "Mask", "Session", "colorize", "infer", "open_session",
    "DType", "Layout", "QuantParams", "Tensor", "convert_layout",
    "TrainLog", "average_gradients", "evaluate", "fit", "load_checkpoint",
    "save_checkpoint", "train_step",
    "__version__",
]
