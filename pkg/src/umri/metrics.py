"""Image quality metrics on real magnitude images and the SSIM training loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

PSNR_CAP = 99.0


@dataclass(frozen=True)
class SsimParams:
    win_size: int = 7
    k1: float = 0.01
    k2: float = 0.03


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.is_complex():
        raise ShapeError("metrics take real magnitude images")
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x.unsqueeze(1)
    return x


def ssim_map_mean(x: torch.Tensor, y: torch.Tensor, data_range, params: SsimParams = SsimParams()) -> torch.Tensor:
    """Per-image mean SSIM over valid uniform windows; ``x``, ``y`` are ``(B, 1, H, W)``.

    Uses sample (unbiased) local covariances. ``data_range`` is a scalar or a
    per-image ``(B,)`` tensor.
    """
    if x.shape != y.shape:
        raise ShapeError(f"ssim shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    w = params.win_size
    if min(x.shape[-2:]) < w:
        raise ShapeError(f"images smaller than the {w}x{w} SSIM window")
    dr = torch.as_tensor(data_range, dtype=x.dtype).reshape(-1, 1, 1, 1)
    if bool((dr <= 0).any()):
        raise ConfigError("data_range must be positive")
    kernel = torch.full((1, 1, w, w), 1.0 / (w * w), dtype=x.dtype)
    np_ = w * w
    cov_norm = np_ / (np_ - 1)
    c1 = (params.k1 * dr) ** 2
    c2 = (params.k2 * dr) ** 2
    ux = F.conv2d(x, kernel)
    uy = F.conv2d(y, kernel)
    uxx = F.conv2d(x * x, kernel)
    uyy = F.conv2d(y * y, kernel)
    uxy = F.conv2d(x * y, kernel)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return (num / den).mean(dim=(1, 2, 3))


def ssim(x, y, data_range=None, params: SsimParams = SsimParams()) -> float:
    """Single-scale SSIM; ``data_range`` defaults to ``y.max()`` (the target)."""
    xt = _as_batch(x).to(torch.float64)
    yt = _as_batch(y).to(torch.float64)
    if data_range is None:
        data_range = float(yt.max())
    if data_range <= 0:
        raise ConfigError(f"data_range must be positive, got {data_range}")
    return float(ssim_map_mean(xt, yt, data_range, params).mean())


def ssim_loss(recon: torch.Tensor, target: torch.Tensor, data_range=None,
              params: SsimParams = SsimParams()) -> torch.Tensor:
    """Differentiable ``1 - SSIM`` averaged over the batch.

    ``data_range`` defaults to each target's maximum.
    """
    r, t = _as_batch(recon), _as_batch(target)
    if data_range is None:
        data_range = t.detach().amax(dim=(1, 2, 3))
    return 1.0 - ssim_map_mean(r, t, data_range, params).mean()


def psnr(x, y, max_val=None, cap: float | None = PSNR_CAP) -> float:
    """``10 log10(max_val^2 / MSE)`` in dB; ``max_val`` defaults to ``y.max()``.

    Zero MSE returns ``cap`` (or ``inf`` when ``cap`` is None).
    """
    xa, ya = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape:
        raise ShapeError(f"psnr shapes differ: {xa.shape} vs {ya.shape}")
    if max_val is None:
        max_val = float(ya.max())
    mse = float(np.mean((xa - ya) ** 2))
    if mse == 0.0:
        return math.inf if cap is None else cap
    return 10.0 * math.log10(max_val ** 2 / mse)


def nmse(recon, target) -> float:
    """``||recon - target||^2 / ||target||^2``."""
    r, t = np.asarray(recon, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ShapeError(f"nmse shapes differ: {r.shape} vs {t.shape}")
    denom = float(np.sum(t ** 2))
    if denom == 0.0:
        raise ConfigError("nmse undefined for an all-zero target")
    return float(np.sum((r - t) ** 2)) / denom


@dataclass
class MetricReport:
    """Per-sample metrics plus mean/std aggregates."""

    ssim: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    nmse: list[float] = field(default_factory=list)

    def add(self, recon, target) -> dict[str, float]:
        r = np.asarray(recon, dtype=np.float64)
        t = np.asarray(target, dtype=np.float64)
        row = {"ssim": ssim(r, t), "psnr": psnr(r, t), "nmse": nmse(r, t)}
        for k, v in row.items():
            getattr(self, k).append(v)
        return row

    def __len__(self):
        return len(self.ssim)

    def aggregate(self) -> dict[str, float]:
        out = {}
        for name in ("ssim", "psnr", "nmse"):
            vals = np.asarray(getattr(self, name), dtype=np.float64)
            out[name] = float(vals.mean()) if len(vals) else math.nan
            out[f"{name}_std"] = float(vals.std()) if len(vals) else math.nan
        return out


def evaluate(recon, target) -> dict[str, float]:
    r = np.asarray(recon, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    return {"ssim": ssim(r, t), "psnr": psnr(r, t), "nmse": nmse(r, t)}
