"""Contrastive regularization for learning with noisy labels, at desk scale."""

from .autodiff import Tensor, backward, finite_diff_gradient, stop_gradient
from .model import ArchSpec, ModelParams, classify, encode, init_params, predict_head
from .noise import Dataset, NoiseSpec, gen_blobs, gen_blobs_split
from .training import RunMetrics, TrainConfig, linear_probe, memorization, train_run

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "Dataset", "ModelParams", "NoiseSpec", "RunMetrics", "Tensor", "TrainConfig",
    "backward", "classify", "encode", "finite_diff_gradient", "gen_blobs", "gen_blobs_split",
    "init_params", "linear_probe", "memorization", "predict_head", "stop_gradient", "train_run",
]
