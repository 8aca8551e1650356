"""Shape-checked functional layers and the small modules built from them."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeError


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> torch.Tensor:
    """Cross-correlation over NCHW input.

    Output spatial size is ``(H + 2 * padding - k) // stride + 1``.
    """
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {tuple(x.shape)}, "
                         f"{tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1] * groups:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects "
                         f"{weight.shape[1] * groups}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def depthwise_separable_conv(x: torch.Tensor, dw_weight: torch.Tensor, pw_weight: torch.Tensor,
                             dw_bias: torch.Tensor | None = None,
                             pw_bias: torch.Tensor | None = None) -> torch.Tensor:
    """Per-channel 3x3 convolution followed by 1x1 channel mixing."""
    channels = x.shape[1]
    if dw_weight.shape[0] != channels or dw_weight.shape[1] != 1:
        raise ShapeError(f"depthwise weight {tuple(dw_weight.shape)} does not match "
                         f"{channels} input channels")
    if pw_weight.shape[1] != channels or pw_weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise weight {tuple(pw_weight.shape)} does not match "
                         f"{channels} channels")
    pad = dw_weight.shape[-1] // 2
    y = conv2d(x, dw_weight, dw_bias, padding=pad, groups=channels)
    return conv2d(y, pw_weight, pw_bias)


def instance_norm(x: torch.Tensor, weight: torch.Tensor | None = None,
                  bias: torch.Tensor | None = None, eps: float = 1e-5) -> torch.Tensor:
    """Per-sample, per-channel standardization over H and W, then affine."""
    if x.dim() != 4:
        raise ShapeError(f"instance_norm expects NCHW, got {tuple(x.shape)}")
    if x.shape[-1] * x.shape[-2] == 1:
        # a single pixel standardizes to zero; torch refuses this case in training mode
        out = torch.zeros_like(x)
        if weight is not None:
            out = out * weight.view(1, -1, 1, 1)
        if bias is not None:
            out = out + bias.view(1, -1, 1, 1)
        return out
    return F.instance_norm(x, weight=weight, bias=bias, eps=eps)


def layer_norm(x: torch.Tensor, weight: torch.Tensor | None = None,
               bias: torch.Tensor | None = None, eps: float = 1e-5) -> torch.Tensor:
    """Standardize over the last (embedding) axis, then affine."""
    if weight is not None and weight.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm weight {tuple(weight.shape)} vs input {tuple(x.shape)}")
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def bilinear_resize(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Align-corners-false bilinear resampling of NCHW input."""
    if x.dim() != 4:
        raise ShapeError(f"bilinear_resize expects NCHW, got {tuple(x.shape)}")
    if x.shape[-2:] == (out_h, out_w):
        return x
    return F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)


class InstanceNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return instance_norm(x, self.weight, self.bias, self.eps)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class DepthwiseSeparableConv(nn.Module):
    """3x3 depthwise + 1x1 pointwise convolution.

    Parameter count is ``C * 9 + C * C_out`` (plus biases) instead of
    ``C * C_out * 9`` for a full 3x3 convolution.
    """

    def __init__(self, in_ch: int, out_ch: int, bias: bool = True):
        super().__init__()
        self.depthwise = nn.Conv2d(in_ch, in_ch, 3, padding=1, groups=in_ch, bias=False)
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1, bias=bias)

    def forward(self, x):
        return depthwise_separable_conv(x, self.depthwise.weight, self.pointwise.weight,
                                        pw_bias=self.pointwise.bias)


def complex_to_channels(x: torch.Tensor) -> torch.Tensor:
    """(B, H, W) complex -> (B, 2, H, W) real."""
    return torch.stack([x.real, x.imag], dim=1)


def channels_to_complex(x: torch.Tensor) -> torch.Tensor:
    """(B, 2, H, W) real -> (B, H, W) complex."""
    return torch.complex(x[:, 0], x[:, 1])
