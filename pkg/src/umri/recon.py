"""Unrolled k-space cascades with learned sensitivity estimation.

Each cascade applies

    k_next = k - mu_t * M (k - k_meas) + G(k),   G = F o E o D o R o F^-1

where ``D`` is the image-domain denoiser and ``E``/``R`` expand/reduce with
the estimated sensitivity maps. The final estimate is coil-combined by RSS.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import nn

from . import physics
from .errors import ConfigError, ShapeError
from .nn.layers import channels_to_complex, complex_to_channels
from .nn.unet import NormUNet
from .physics import SamplingMask


@dataclass(frozen=True)
class SmeConfig:
    pooling_layers: int = 4
    base_channels: int = 8

    def __post_init__(self):
        if self.pooling_layers < 1 or self.base_channels < 1:
            raise ConfigError(f"invalid SME config {self}")


@dataclass(frozen=True)
class CascadeParams:
    num_cascades: int = 4
    shared_denoiser: bool = True

    def __post_init__(self):
        if self.num_cascades < 1:
            raise ConfigError(f"num_cascades must be >= 1, got {self.num_cascades}")


def _mask_tensor(mask, width: int) -> torch.Tensor:
    if isinstance(mask, SamplingMask):
        if mask.width != width:
            raise ShapeError(f"mask width {mask.width} != k-space width {width}")
        return torch.from_numpy(mask.columns.copy()) != 0
    vec = torch.as_tensor(mask)
    if vec.shape[-1] != width:
        raise ShapeError(f"mask width {vec.shape[-1]} != k-space width {width}")
    return vec != 0


class SensitivityEstimator(nn.Module):
    """ACS low-pass coil images, residual U-Net refinement, RSS normalization.

    Each coil is refined independently as a 2-channel (real, imag) image with
    coils folded into the batch axis. The U-Net starts at zero output, so an
    untrained estimator returns the normalized ACS images.
    """

    def __init__(self, cfg: SmeConfig = SmeConfig()):
        super().__init__()
        self.cfg = cfg
        self.refine = NormUNet(2, 2, cfg.base_channels, cfg.pooling_layers)

    def forward(self, masked_kspace: torch.Tensor, mask: SamplingMask) -> torch.Tensor:
        if mask.acs_count < 1:
            raise ConfigError("sensitivity estimation needs a nonempty ACS block")
        squeeze = masked_kspace.dim() == 3
        k = masked_kspace.unsqueeze(0) if squeeze else masked_kspace
        acs = physics.apply_mask(k, mask.acs_columns())
        images = physics.ifft2c(acs)
        b, n, h, w = images.shape
        flat = images.reshape(b * n, h, w)
        chans = complex_to_channels(flat).to(self.refine.unet.head.weight.dtype)
        refined = flat + channels_to_complex(self.refine(chans)).to(flat.dtype)
        sens = physics.normalize_sensitivities(refined.reshape(b, n, h, w))
        return sens[0] if squeeze else sens



def estimate_sensitivities(masked_kspace, mask: SamplingMask, sme: Optional[SensitivityEstimator] = None):
    """Inference-mode maps; ``sme=None`` uses an untrained (identity-refinement) estimator."""
    sme = sme or SensitivityEstimator()
    k = torch.as_tensor(masked_kspace)
    sme = sme.to(torch.float64 if k.dtype == torch.complex128 else torch.float32)
    with torch.no_grad():
        return sme(k, mask)


def regularizer_G(k: torch.Tensor, sens: torch.Tensor, denoiser: Callable) -> torch.Tensor:
    """F(E(D(R(F^-1(k))))) over multi-coil k-space ``(..., N, H, W)``."""
    image = physics.reduce(physics.ifft2c(k), sens)
    return physics.fft2c(physics.expand(denoiser(image), sens))


def cascade_step(k_t, k_tilde, mask, mu_t, sens, denoiser: Callable) -> torch.Tensor:
    """One cascade: data-consistency pull on sampled columns plus ``G(k_t)``."""
    if k_t.shape != k_tilde.shape:
        raise ShapeError(f"estimate {tuple(k_t.shape)} vs measurements {tuple(k_tilde.shape)}")
    keep = _mask_tensor(mask, k_t.shape[-1])
    zero = torch.zeros((), dtype=k_t.dtype)
    dc = torch.where(keep, k_t - k_tilde, zero)
    return k_t - mu_t * dc + regularizer_G(k_t, sens, denoiser)


class UnrolledRecon(nn.Module):
    """SME + ``T`` cascades + RSS.

    ``denoiser_factory`` builds one denoiser (shared) or one per cascade.
    ``num_cascades=0`` is accepted here and yields the zero-filled baseline.
    """

    def __init__(self, denoiser_factory: Callable[[], nn.Module], num_cascades: int = 4,
                 shared_denoiser: bool = True, sme_cfg: SmeConfig = SmeConfig()):
        super().__init__()
        self.num_cascades = num_cascades
        self.shared_denoiser = shared_denoiser
        self.sme = SensitivityEstimator(sme_cfg)
        n_den = min(1, num_cascades) if shared_denoiser else num_cascades
        self.denoisers = nn.ModuleList(denoiser_factory() for _ in range(n_den))
        self.mu = nn.Parameter(torch.ones(num_cascades))

    def denoiser_for(self, t: int) -> nn.Module:
        return self.denoisers[0 if self.shared_denoiser else t]

    def forward_kspace(self, masked_kspace: torch.Tensor, mask: SamplingMask) -> tuple[torch.Tensor, torch.Tensor]:
        sens = self.sme(masked_kspace, mask)
        k = masked_kspace
        for t in range(self.num_cascades):
            k = cascade_step(k, masked_kspace, mask, self.mu[t], sens, self.denoiser_for(t))
        return k, sens

    def forward(self, masked_kspace: torch.Tensor, mask: SamplingMask) -> torch.Tensor:
        k, _ = self.forward_kspace(masked_kspace, mask)
        return physics.rss(physics.ifft2c(k))


def reconstruct(masked_kspace, mask: SamplingMask, model: UnrolledRecon) -> torch.Tensor:
    """Inference-mode reconstruction to a real magnitude image."""
    with torch.no_grad():
        return model(torch.as_tensor(masked_kspace), mask)
