"""Desk-scale differentiable 4D Gaussian splatting with context and deformation awareness."""

from .awareness import DcnParams, aggregate_awareness, dcn_compensate, time_embedding
from .deformation import HexPlaneField, deform, hexplane_encode
from .gaussians import Camera, GaussianScene, init_from_points, load_scene, save_scene
from .losses import LossWeights, psnr, ssim, total_loss
from .pipeline import Model
from .rasterizer import render, render_backward
from .synthetic import SceneSpec, bundled_spec, generate_dataset, oracle_render
from .trainer import Trainer, TrainingConfig, evaluate, load_checkpoint, train

__version__ = "0.1.0"
