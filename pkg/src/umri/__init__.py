"""Unrolled multi-coil MRI reconstruction with a frozen foundation-encoder denoiser."""
from .denoiser import CnnDenoiser, DenoiserConfig, FoundationDenoiser, denoise
from .metrics import evaluate, nmse, psnr, ssim, ssim_loss
from .physics import fft2c, ifft2c, make_equispaced_mask, rss
from .recon import SmeConfig, UnrolledRecon, reconstruct
from .train import Schedule

__version__ = "0.1.0"

__all__ = [
    "CnnDenoiser", "DenoiserConfig", "FoundationDenoiser", "Schedule", "SmeConfig",
    "UnrolledRecon", "denoise", "evaluate", "fft2c", "ifft2c", "make_equispaced_mask",
    "nmse", "psnr", "reconstruct", "rss", "ssim", "ssim_loss",
]
