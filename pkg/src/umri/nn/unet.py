"""Small normalized U-Net used for sensitivity refinement and the CNN baseline."""
from __future__ import annotations

import torch
from torch import nn

from .layers import InstanceNorm2d, bilinear_resize


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False), InstanceNorm2d(out_ch),
            nn.LeakyReLU(0.2),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False), InstanceNorm2d(out_ch),
            nn.LeakyReLU(0.2),
        )

    def forward(self, x):
        return self.layers(x)


class UNet(nn.Module):
    """Encoder/decoder with ``pools`` average-pool levels and bilinear upsampling.

    Works for any spatial size: upsampled maps are resized to the matching
    skip. The final 1x1 convolution starts at zero, so a fresh network
    outputs exactly zero.
    """

    def __init__(self, in_ch: int, out_ch: int, chans: int = 8, pools: int = 4):
        super().__init__()
        self.down = nn.ModuleList([ConvBlock(in_ch, chans)])
        ch = chans
        for _ in range(pools - 1):
            self.down.append(ConvBlock(ch, ch * 2))
            ch *= 2
        self.bottom = ConvBlock(ch, ch * 2)
        self.up = nn.ModuleList()
        for _ in range(pools):
            self.up.append(ConvBlock(ch * 3, ch))
            ch //= 2
        self.head = nn.Conv2d(chans, out_ch, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = nn.functional.avg_pool2d(x, 2, ceil_mode=True)
        x = self.bottom(x)
        for block in self.up:
            skip = skips.pop()
            x = bilinear_resize(x, *skip.shape[-2:])
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


class NormUNet(nn.Module):
    """U-Net on per-sample standardized input; output rescaled by the input std.

    ``forward`` returns ``std * unet((x - mean) / std)`` (no mean added back) so
    that a zero head yields an exactly zero output.
    """

    def __init__(self, in_ch: int, out_ch: int, chans: int = 8, pools: int = 4):
        super().__init__()
        self.unet = UNet(in_ch, out_ch, chans, pools)

    def forward(self, x):
        b = x.shape[0]
        flat = x.reshape(b, -1)
        mean = flat.mean(dim=1).view(b, 1, 1, 1)
        std = flat.std(dim=1).clamp_min(1e-12).view(b, 1, 1, 1)
        return self.unet((x - mean) / std) * std
