"""Self-supervised image denoising with a two-stage blind-spot transformer.

The model masks every pixel exactly once across a stack of blind images,
predicts their noise with a stack of dual-branch (window attention plus
deformable convolution) units, refines the result with a per-pixel channel
MLP and reassembles the blind-spot pixels into one estimate.
"""
from .cadt import StackConfig
from .checkpoint import Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from .config import RunConfig, load_config, preset
from .errors import ConfigError, DenoiseError, FormatError, NumericalError, ShapeError, StateError
from .metrics import EvalResult, psnr, ssim
from .model import DenoiserModel, ModelConfig, full_inference
from .trainer import TrainConfig, TrainData, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigError", "DenoiseError", "DenoiserModel", "EvalResult", "FormatError",
    "ModelConfig", "NumericalError", "RunConfig", "ShapeError", "StackConfig", "StateError",
    "TrainConfig", "TrainData", "full_inference", "load_checkpoint", "load_config", "preset",
    "psnr", "read_checkpoint", "save_checkpoint", "ssim", "train",
]
