from .conditioning import ConditionEmbedder
from .denoiser import UNet3d
from .edm import EDMDenoiser, edm_loss, edm_sample, gaussian_denoiser, guided, precond_coeffs, sigma_grid
from .stats import RobustStats, compute_robust_stats, robust_denormalize, robust_normalize
from .training import DiffusionError, DiffusionTrainer, LatentDiffusion, load_diffusion, train_diffusion

__all__ = [
    "ConditionEmbedder",
    "DiffusionError",
    "DiffusionTrainer",
    "EDMDenoiser",
    "LatentDiffusion",
    "RobustStats",
    "UNet3d",
    "compute_robust_stats",
    "edm_loss",
    "edm_sample",
    "gaussian_denoiser",
    "guided",
    "load_diffusion",
    "precond_coeffs",
    "robust_denormalize",
    "robust_normalize",
    "sigma_grid",
    "train_diffusion",
]
