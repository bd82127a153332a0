"""3D split-attention CT volume classification on a numpy autodiff core."""

__version__ = "0.1.0"

from cov3d.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint, transfer_init
from cov3d.kernels import BACKEND
from cov3d.metrics import MetricsReport, macro_f1
from cov3d.model import ModelConfig, ResNeSt3D, build_model, preset
from cov3d.tensor import Tensor, float64_mode, no_grad
from cov3d.train import TrainConfig, evaluate, train
from cov3d.volume import Volume, preprocess_scan

__all__ = [
    "BACKEND",
    "Checkpoint",
    "CheckpointError",
    "MetricsReport",
    "ModelConfig",
    "ResNeSt3D",
    "Tensor",
    "TrainConfig",
    "Volume",
    "build_model",
    "evaluate",
    "float64_mode",
    "load_checkpoint",
    "macro_f1",
    "no_grad",
    "preprocess_scan",
    "preset",
    "save_checkpoint",
    "train",
    "transfer_init",
]
