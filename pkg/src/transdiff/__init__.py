"""Autoregressive transformer encoder + rectified-flow diffusion decoder, at desk scale."""
from .analysis import centroid_accuracy, diversity_metric, fuse_conditions, sliced_wasserstein
from .flow import flow_loss, interpolate, velocity_target, velocity_to_score
from .model import ModelConfig, TransDiff, infer_1step, infer_mrar, joint_loss, preset
from .numeric import SeededRng, grad_check, precision, set_precision
from .sampler import SamplerConfig, em_sde_step, ode_step, sample_latent

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "SamplerConfig", "SeededRng", "TransDiff",
    "centroid_accuracy", "diversity_metric", "em_sde_step", "flow_loss", "fuse_conditions",
    "grad_check", "infer_1step", "infer_mrar", "interpolate", "joint_loss", "ode_step",
    "precision", "preset", "sample_latent", "set_precision", "sliced_wasserstein",
    "velocity_target", "velocity_to_score",
]
