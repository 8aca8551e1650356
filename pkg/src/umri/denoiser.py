"""Image-domain denoisers plugged into the unrolled cascades.

``FoundationDenoiser`` feeds a magnitude view of the current estimate through a
frozen ViT, fuses the first six blocks' tokens with learnable softmax weights
and decodes them with a UNETR-style hierarchy back to a complex image.
``CnnDenoiser`` is the task-specific U-Net baseline.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn

from .errors import ConfigError, InvalidDataError, ShapeError
from .nn.layers import (DepthwiseSeparableConv, InstanceNorm2d, LayerNorm, bilinear_resize,
                        channels_to_complex, complex_to_channels, layer_norm)
from .nn.unet import NormUNet
from .nn.vit import VisionTransformer, VitConfig, tokens_to_map
from .nn.weights import import_encoder

FUSED_LAYERS = 6
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class DenoiserConfig:
    encoder: VitConfig = field(default_factory=VitConfig)
    working_size: int = 64
    skip_layers: tuple[int, ...] = (5, 4, 3)
    decoder_channels: Optional[tuple[int, ...]] = None
    input_skip_channels: int = 8
    percentile_bounds: tuple[float, float] = (1.0, 99.0)
    image_mean: tuple[float, float, float] = IMAGENET_MEAN
    image_std: tuple[float, float, float] = IMAGENET_STD
    residual: bool = False
    encoder_seed: int = 0
    encoder_weights: Optional[str] = None

    def __post_init__(self):
        self.skip_layers = tuple(int(i) for i in self.skip_layers)
        if any(a <= b for a, b in zip(self.skip_layers, self.skip_layers[1:])):
            raise ConfigError(f"skip_layers must be strictly decreasing, got {self.skip_layers}")
        if any(not 1 <= i <= FUSED_LAYERS for i in self.skip_layers):
            raise ConfigError(f"skip_layers must index the first {FUSED_LAYERS} encoder layers")
        lo, hi = self.percentile_bounds
        if not 0.0 <= lo < hi <= 100.0:
            raise ConfigError(f"invalid percentile bounds {self.percentile_bounds}")
        if any(s <= 0 for s in self.image_std):
            raise ConfigError("image_std entries must be positive")
        ratio = self.working_size / self.encoder.grid_size
        if ratio < 2 or ratio != 2 ** round(math.log2(ratio)):
            raise ConfigError(f"working_size {self.working_size} must be a power-of-two multiple "
                              f"(>= 2x) of the encoder grid {self.encoder.grid_size}")
        if self.decoder_channels is not None:
            self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
            if len(self.decoder_channels) != self.num_stages:
                raise ConfigError(f"decoder_channels needs {self.num_stages} entries, got "
                                  f"{len(self.decoder_channels)}")

    @property
    def num_stages(self) -> int:
        return round(math.log2(self.working_size / self.encoder.grid_size))

    def stage_channels(self) -> tuple[int, ...]:
        if self.decoder_channels is not None:
            return self.decoder_channels
        d = self.encoder.embed_dim
        return tuple(max(16, min(256, d >> i)) for i in range(self.num_stages))

    def to_dict(self) -> dict:
        return asdict(self)


class FusionWeights(nn.Module):
    """Learnable logits over the fused layers; ``weights()`` is their softmax."""

    def __init__(self, n: int = FUSED_LAYERS):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(n))

    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)


def _percentiles(mag: torch.Tensor, bounds) -> tuple[torch.Tensor, torch.Tensor]:
    flat = mag.reshape(mag.shape[0], -1)
    q = torch.tensor([bounds[0] / 100.0, bounds[1] / 100.0], dtype=flat.dtype)
    lo, hi = torch.quantile(flat, q, dim=1)
    return lo.view(-1, 1, 1), hi.view(-1, 1, 1)


def percentile_scale(mag: torch.Tensor, bounds) -> tuple[torch.Tensor, torch.Tensor]:
    """Map magnitudes to [0, 1] by percentile clipping.

    Returns ``(scaled, hi)``. If the two percentiles coincide the image is
    divided by the upper one (so a constant image maps to ones), and an image
    whose upper percentile is zero maps to all zeros.
    """
    lo, hi = _percentiles(mag, bounds)
    spread = hi - lo
    ok = spread > 0
    pos = hi > 0
    safe_spread = torch.where(ok, spread, torch.ones_like(spread))
    safe_hi = torch.where(pos, hi, torch.ones_like(hi))
    clipped = torch.minimum(torch.maximum(mag, lo), hi)
    ranged = (clipped - lo) / safe_spread
    flat = torch.minimum(mag, hi) / safe_hi
    out = torch.where(ok, ranged, torch.where(pos, flat, torch.zeros_like(mag)))
    return out, hi


def preprocess(x: torch.Tensor, cfg: DenoiserConfig, return_scale: bool = False):
    """Complex image(s) ``(H, W)`` or ``(B, H, W)`` -> standardized ``(B, 3, S, S)``."""
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if not bool(torch.isfinite(torch.view_as_real(x)).all()):
        raise InvalidDataError("denoiser input contains non-finite samples")
    scaled, hi = percentile_scale(x.abs(), cfg.percentile_bounds)
    s = cfg.encoder.input_size
    img = bilinear_resize(scaled.unsqueeze(1), s, s).expand(-1, 3, -1, -1)
    mean = torch.tensor(cfg.image_mean, dtype=img.dtype).view(1, 3, 1, 1)
    std = torch.tensor(cfg.image_std, dtype=img.dtype).view(1, 3, 1, 1)
    out = (img - mean) / std
    return (out, hi) if return_scale else out


def fuse_layers(layer_tokens: Sequence[torch.Tensor], fusion: FusionWeights | torch.Tensor,
                norms: Sequence[nn.Module] | None = None, grid: int | None = None) -> torch.Tensor:
    """LayerNorm each token set, combine with softmax weights, reshape to a map.

    ``fusion`` may be a :class:`FusionWeights` or a raw logits tensor. Without
    ``norms`` a plain (affine-free) layer norm is used.
    """
    if len(layer_tokens) != FUSED_LAYERS:
        raise ShapeError(f"expected {FUSED_LAYERS} token sets, got {len(layer_tokens)}")
    shape = layer_tokens[0].shape
    if any(t.shape != shape for t in layer_tokens):
        raise ShapeError("token sets differ in shape")
    w = fusion.weights() if isinstance(fusion, FusionWeights) else torch.softmax(fusion, dim=0)
    if norms is None:
        normed = [layer_norm(t) for t in layer_tokens]
    else:
        normed = [n(t) for n, t in zip(norms, layer_tokens)]
    fused = sum(wi * t for wi, t in zip(w.to(normed[0].dtype), normed))
    if grid is None:
        grid = math.isqrt(shape[1] - 1)
    return tokens_to_map(fused, grid)


class DecoderStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, skip_ch: int):
        super().__init__()
        self.up_conv = DepthwiseSeparableConv(in_ch, out_ch)
        self.up_norm = InstanceNorm2d(out_ch)
        self.refine = nn.Conv2d(out_ch + skip_ch, out_ch, 3, padding=1)
        self.refine_norm = InstanceNorm2d(out_ch)

    def forward(self, x, skips: list[torch.Tensor]):
        h, w = x.shape[-2:]
        x = bilinear_resize(x, 2 * h, 2 * w)
        x = torch.relu(self.up_norm(self.up_conv(x)))
        if skips:
            x = torch.cat([x, *skips], dim=1)
        return torch.relu(self.refine_norm(self.refine(x)))


class FoundationDenoiser(nn.Module):
    """Frozen-ViT guided denoiser operating on complex images ``(B, H, W)``."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        self.encoder = VisionTransformer(enc, seed=cfg.encoder_seed)
        if cfg.encoder_weights:
            import_encoder(cfg.encoder_weights, self.encoder)
        self.encoder.requires_grad_(False)
        self.fusion = FusionWeights()
        self.norms = nn.ModuleList(LayerNorm(enc.embed_dim) for _ in range(FUSED_LAYERS))

        chans = cfg.stage_channels()
        n_skip = min(len(cfg.skip_layers), cfg.num_stages)
        self.skip_proj = nn.ModuleList(nn.Conv2d(enc.embed_dim, chans[i], 1)
                                       for i in range(n_skip))
        self.input_skip = nn.Conv2d(2, cfg.input_skip_channels, 3, padding=1)
        stages = []
        in_ch = enc.embed_dim
        for i, c in enumerate(chans):
            skip_ch = chans[i] if i < n_skip else 0
            if i == len(chans) - 1:
                skip_ch += cfg.input_skip_channels
            stages.append(DecoderStage(in_ch, c, skip_ch))
            in_ch = c
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(chans[-1], 2, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def encode(self, x: torch.Tensor):
        """Preprocess and encode; returns (normed token sets, percentile scale)."""
        img, hi = preprocess(x, self.cfg, return_scale=True)
        tokens = self.encoder.forward_layers(img.to(self.head.weight.dtype), FUSED_LAYERS)
        return tokens, hi

    def decode(self, fused: torch.Tensor, skip_maps: Sequence[torch.Tensor],
               input_skip: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        """Hierarchical decoding to a 2-channel ``(B, 2, H, W)`` map.

        ``skip_maps`` are spatial encoder maps in stage order (layers 5, 4, 3 by
        default); ``input_skip`` is the scaled complex input as ``(B, 2, h, w)``.
        """
        ws = self.cfg.working_size
        if len(skip_maps) != len(self.skip_proj):
            raise ShapeError(f"decoder expects {len(self.skip_proj)} skip maps, got {len(skip_maps)}")
        if fused.shape[-1] * 2 ** len(self.stages) != ws:
            raise ShapeError(f"fused map {tuple(fused.shape)} incompatible with working size {ws}")
        inp = self.input_skip(bilinear_resize(input_skip, ws, ws))
        x = fused
        for i, stage in enumerate(self.stages):
            size = x.shape[-1] * 2
            skips = []
            if i < len(skip_maps):
                skips.append(self.skip_proj[i](bilinear_resize(skip_maps[i], size, size)))
            if i == len(self.stages) - 1:
                skips.append(inp)
            x = stage(x, skips)
        return bilinear_resize(self.head(x), *out_hw)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        tokens, hi = self.encode(x)
        grid = self.cfg.encoder.grid_size
        fused = fuse_layers(tokens, self.fusion, self.norms, grid)
        skip_maps = [tokens_to_map(self.norms[i - 1](tokens[i - 1]), grid)
                     for i in self.cfg.skip_layers[:len(self.skip_proj)]]
        scale = torch.where(hi > 0, hi, torch.ones_like(hi)).to(self.head.weight.dtype)
        xr = x / scale
        out = self.decode(fused, skip_maps, complex_to_channels(xr), tuple(x.shape[-2:]))
        out = channels_to_complex(out) * scale
        if self.cfg.residual:
            out = out + x
        return out[0] if squeeze else out


class CnnDenoiser(nn.Module):
    """U-Net baseline on the (real, imaginary) channel pair."""

    def __init__(self, chans: int = 12, pools: int = 3, residual: bool = False):
        super().__init__()
        self.residual = residual
        self.net = NormUNet(2, 2, chans, pools)

    def forward(self, x):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        real_dtype = self.net.unet.head.weight.dtype
        out = channels_to_complex(self.net(complex_to_channels(x).to(real_dtype)))
        if self.residual:
            out = out + x
        return out[0] if squeeze else out


def denoise(x: torch.Tensor, cfg: DenoiserConfig, weights=None) -> torch.Tensor:
    """Functional wrapper: build a :class:`FoundationDenoiser`, load weights, evaluate."""
    model = FoundationDenoiser(cfg)
    if weights is not None:
        weights.assign_to(model)
    with torch.no_grad():
        return model(x)
