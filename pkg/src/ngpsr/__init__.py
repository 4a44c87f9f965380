"""Token-conditioned multi-resolution hash fields for multi-view super-resolution."""

from .autodiff import AdamState, Tape, Tensor, backward
from .data import CameraPose, SceneDataset, ViewRecord, load_scene, psnr, save_scene, ssim, synth_scene
from .model import ABLATIONS, Model, ModelConfig, ViewCache, forward, parameter_count, render_view
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "ABLATIONS", "AdamState", "CameraPose", "Model", "ModelConfig", "SceneDataset", "Tape", "Tensor",
    "TrainConfig", "ViewCache", "ViewRecord", "backward", "forward", "load_checkpoint", "load_scene",
    "parameter_count", "psnr", "render_view", "save_checkpoint", "save_scene", "ssim", "synth_scene", "train",
]
__version__ = "0.1.0"
