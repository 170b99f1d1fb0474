"""Hyperspectral super-resolution by conditional diffusion with a dual-stream transformer denoiser."""

from .cdformer import CDFormer, ModelConfig, denoise, init_params
from .degradation import (HsiCube, SceneConfig, SpatialDegradation, SpectralResponse, default_response,
                          load_cube, make_pair, save_cube, synthesize_scene)
from .metrics import MetricReport, ergas, evaluate, psnr, sam, ssim
from .numerics import Rng, Tensor
from .schedule import build_inference_schedule, build_training_schedule, sample
from .training import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "CDFormer", "ModelConfig", "denoise", "init_params",
    "HsiCube", "SceneConfig", "SpatialDegradation", "SpectralResponse", "default_response",
    "load_cube", "make_pair", "save_cube", "synthesize_scene",
    "MetricReport", "ergas", "evaluate", "psnr", "sam", "ssim",
    "Rng", "Tensor",
    "build_inference_schedule", "build_training_schedule", "sample",
    "TrainConfig", "run_training",
]
