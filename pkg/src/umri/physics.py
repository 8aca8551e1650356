"""Multi-coil Cartesian MRI forward model.

Conventions used throughout the package:

* images are complex tensors of shape ``(..., H, W)``;
* multi-coil data (k-space or coil images) has shape ``(..., N, H, W)``;
* the phase-encode (undersampled) axis is the last one, ``W``.

The centered orthonormal FFT maps the zero frequency to index ``(H // 2, W // 2)``
and preserves the l2 norm, so the acquisition operator and its adjoint are
exact transposes of each other.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, InvalidDataError, ShapeError

SUPPORT_THRESHOLD = 1e-8


def _as_complex(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if not x.is_complex():
        x = x.to(torch.complex128 if x.dtype == torch.float64 else torch.complex64)
    return x


def _check_finite(x: torch.Tensor) -> None:
    if not bool(torch.isfinite(torch.view_as_real(x)).all()):
        raise InvalidDataError("input contains non-finite samples")


def fft2c(image) -> torch.Tensor:
    """Centered, orthonormal 2D DFT over the last two axes."""
    x = _as_complex(image)
    _check_finite(x)
    x = torch.fft.ifftshift(x, dim=(-2, -1))
    x = torch.fft.fft2(x, norm="ortho")
    return torch.fft.fftshift(x, dim=(-2, -1))


def ifft2c(kspace) -> torch.Tensor:
    """Inverse of :func:`fft2c`."""
    k = _as_complex(kspace)
    _check_finite(k)
    k = torch.fft.ifftshift(k, dim=(-2, -1))
    k = torch.fft.ifft2(k, norm="ortho")
    return torch.fft.fftshift(k, dim=(-2, -1))


def acs_width(width: int, acs_lines: Optional[int] = None,
              center_fraction: Optional[float] = None) -> int:
    """Number of fully sampled central columns for an ACS specification."""
    if (acs_lines is None) == (center_fraction is None):
        raise ConfigError("exactly one of acs_lines / center_fraction is required")
    if acs_lines is not None:
        if int(acs_lines) != acs_lines or acs_lines < 1:
            raise ConfigError(f"acs_lines must be a positive integer, got {acs_lines}")
        return int(acs_lines)
    if not 0.0 < center_fraction <= 1.0:
        raise ConfigError(f"center_fraction must lie in (0, 1], got {center_fraction}")
    # round half up; tiny slack absorbs binary representation error (0.08 * 100)
    return max(1, int(np.floor(center_fraction * width + 0.5 + 1e-9)))


@dataclass(frozen=True)
class SamplingMask:
    """Binary column mask over the phase-encode axis.

    ``columns`` is a read-only uint8 vector of length ``width``. Exactly one of
    ``acs_lines`` / ``center_fraction`` records how the ACS block was specified;
    ``acs_count`` is the resulting block width.
    """

    width: int
    columns: np.ndarray
    acceleration: int
    acs_count: int
    acs_lines: Optional[int] = None
    center_fraction: Optional[float] = None

    def __post_init__(self):
        cols = np.asarray(self.columns)
        if cols.shape != (self.width,):
            raise ShapeError(f"mask has {cols.shape} columns, expected ({self.width},)")
        if not np.isin(cols, (0, 1)).all():
            raise ConfigError("mask columns must be 0/1 valued")
        if cols.sum() == 0:
            raise ConfigError("mask samples no columns")
        lo, hi = self.acs_range
        if not cols[lo:hi].all():
            raise ConfigError("ACS block is not fully sampled")
        cols = cols.astype(np.uint8)
        cols.setflags(write=False)
        object.__setattr__(self, "columns", cols)

    @property
    def acs_range(self) -> tuple[int, int]:
        start = (self.width - self.acs_count) // 2
        return start, start + self.acs_count

    @property
    def num_sampled(self) -> int:
        return int(self.columns.sum())

    @property
    def net_acceleration(self) -> float:
        return self.width / self.num_sampled

    @property
    def acs_label(self) -> str:
        if self.center_fraction is not None:
            return f"cf={self.center_fraction:g}"
        return f"lines={self.acs_lines}"

    def sampled_indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.columns)]

    def acs_columns(self) -> np.ndarray:
        """0/1 vector selecting only the ACS block."""
        out = np.zeros(self.width, dtype=np.uint8)
        lo, hi = self.acs_range
        out[lo:hi] = 1
        return out

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.columns, dtype=dtype)


def make_equispaced_mask(width: int, acceleration: int, acs_lines: Optional[int] = None,
                         center_fraction: Optional[float] = None) -> SamplingMask:
    """Equispaced Cartesian mask with a centered, fully sampled ACS block.

    Outside the block, columns ``j`` with ``j % acceleration == 0`` are sampled.
    The block starts at ``(width - A) // 2`` where ``A`` is the ACS width.

    >>> make_equispaced_mask(16, 4, acs_lines=4).sampled_indices()
    [0, 4, 6, 7, 8, 9, 12]
    """
    if acceleration < 1 or int(acceleration) != acceleration:
        raise ConfigError(f"acceleration must be a positive integer, got {acceleration}")
    if width < 1:
        raise ConfigError(f"width must be positive, got {width}")
    count = acs_width(width, acs_lines, center_fraction)
    if count > width:
        raise ConfigError(f"ACS block of {count} columns exceeds image width {width}")
    cols = (np.arange(width) % acceleration == 0).astype(np.uint8)
    start = (width - count) // 2
    cols[start:start + count] = 1
    return SamplingMask(width=width, columns=cols, acceleration=int(acceleration),
                        acs_count=count, acs_lines=acs_lines, center_fraction=center_fraction)


def _mask_vector(mask, width: int, like: torch.Tensor) -> torch.Tensor:
    if isinstance(mask, SamplingMask):
        if mask.width != width:
            raise ShapeError(f"mask width {mask.width} != k-space width {width}")
        vec = torch.from_numpy(mask.columns.copy())
    else:
        vec = torch.as_tensor(mask)
        if vec.shape[-1] != width:
            raise ShapeError(f"mask width {vec.shape[-1]} != k-space width {width}")
    return vec.to(device=like.device) != 0


def apply_mask(kspace, mask) -> torch.Tensor:
    """Zero every unsampled column; sampled columns pass through unchanged."""
    k = _as_complex(kspace)
    keep = _mask_vector(mask, k.shape[-1], k)
    return torch.where(keep, k, torch.zeros((), dtype=k.dtype))


def _check_coil_shapes(images: torch.Tensor, sens: torch.Tensor, coil_axis: bool) -> None:
    spatial = images.shape[-3:] if coil_axis else images.shape[-2:]
    ref = sens.shape[-3:] if coil_axis else sens.shape[-2:]
    if spatial != ref:
        raise ShapeError(f"image shape {tuple(images.shape)} incompatible with "
                         f"sensitivity maps {tuple(sens.shape)}")


def expand(image, sens) -> torch.Tensor:
    """Coil images ``S_i * x``; output shape ``(..., N, H, W)``."""
    x, s = _as_complex(image), _as_complex(sens)
    _check_coil_shapes(x, s, coil_axis=False)
    return s * x.unsqueeze(-3)


def reduce(coil_images, sens) -> torch.Tensor:
    """Conjugate-weighted coil sum ``sum_i conj(S_i) * x_i``."""
    xs, s = _as_complex(coil_images), _as_complex(sens)
    _check_coil_shapes(xs, s, coil_axis=True)
    return (s.conj() * xs).sum(dim=-3)


def forward_operator(image, sens, mask) -> torch.Tensor:
    """Undersampled multi-coil acquisition: mask(FFT(S_i x))."""
    return apply_mask(fft2c(expand(image, sens)), mask)


def adjoint_operator(kspace, sens, mask) -> torch.Tensor:
    """Adjoint of :func:`forward_operator`."""
    return reduce(ifft2c(apply_mask(kspace, mask)), sens)


def rss(coil_images, dim: int = -3) -> torch.Tensor:
    """Root-sum-of-squares coil combination (real, nonnegative)."""
    xs = torch.as_tensor(coil_images)
    mag2 = xs.real ** 2 + xs.imag ** 2 if xs.is_complex() else xs ** 2
    return torch.sqrt(mag2.sum(dim=dim))


def normalize_sensitivities(raw, threshold: float = SUPPORT_THRESHOLD) -> torch.Tensor:
    """Pixelwise RSS-normalize raw coil profiles.

    Pixels whose raw RSS does not exceed ``threshold`` are outside the support
    and set to zero on every coil.
    """
    s = _as_complex(raw)
    norm = rss(s).unsqueeze(-3)
    support = norm > threshold
    safe = torch.where(support, norm, torch.ones((), dtype=norm.dtype))
    return torch.where(support, s / safe, torch.zeros((), dtype=s.dtype))


def support_of(sens) -> torch.Tensor:
    """Boolean support set of normalized maps (any coil nonzero)."""
    return rss(sens) > 0


def zero_filled(masked_kspace) -> torch.Tensor:
    """RSS of the inverse FFT of masked data; the reconstruction floor."""
    return rss(ifft2c(masked_kspace))
