"""Pre-norm Vision Transformer encoder returning every block's tokens."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from ..errors import ConfigError, ShapeError
from .layers import LayerNorm


@dataclass(frozen=True)
class VitConfig:
    input_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.input_size <= 0 or self.patch_size <= 0:
            raise ConfigError("input_size and patch_size must be positive")
        if self.input_size % self.patch_size:
            raise ConfigError(f"input_size {self.input_size} is not divisible by "
                              f"patch_size {self.patch_size}")
        if self.num_layers < 6:
            raise ConfigError(f"num_layers must be >= 6, got {self.num_layers}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by "
                              f"num_heads {self.num_heads}")

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk": VitConfig(),
    "vit-b": VitConfig(input_size=224, patch_size=16, embed_dim=768, num_layers=12,
                       num_heads=12),
}


def preset(name: str) -> VitConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown encoder preset {name!r}; known: {sorted(PRESETS)}") from None


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """ViT with a prepended class token.

    Weights are initialized from a truncated normal (std 0.02) drawn from a
    private generator, so two encoders built with the same seed are identical.
    """

    def __init__(self, config: VitConfig, seed: int = 0):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Conv2d(3, c.embed_dim, c.patch_size, stride=c.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, c.num_patches + 1, c.embed_dim))
        self.blocks = nn.ModuleList(Block(c.embed_dim, c.num_heads, c.mlp_ratio)
                                    for _ in range(c.num_layers))
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif "norm" in name:
                p.fill_(1.0)
            else:
                t = torch.empty(p.shape, dtype=torch.float64)
                t.normal_(0.0, 0.02, generator=gen)
                # resample tails beyond two standard deviations
                while True:
                    bad = t.abs() > 0.04
                    if not bool(bad.any()):
                        break
                    t[bad] = torch.empty(int(bad.sum()), dtype=torch.float64).normal_(
                        0.0, 0.02, generator=gen)
                p.copy_(t)

    def forward_layers(self, image: torch.Tensor, num_layers: int | None = None) -> list[torch.Tensor]:
        """Token sequences ``(B, 1 + P, D)`` after each of the first ``num_layers`` blocks."""
        if image.dim() == 3:
            image = image.unsqueeze(0)
        s = self.config.input_size
        if image.shape[1:] != (3, s, s):
            raise ShapeError(f"encoder expects (3, {s}, {s}) input, got {tuple(image.shape[1:])}")
        x = self.patch_embed(image).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        out = []
        for block in self.blocks[:num_layers]:
            x = block(x)
            out.append(x)
        return out

    def forward(self, image):
        return self.forward_layers(image)


def vit_encode(image: torch.Tensor, config: VitConfig, weights=None, seed: int = 0) -> list[torch.Tensor]:
    """Encode one ``3 x S x S`` image; returns one token tensor per block.

    ``weights`` may be a :class:`~umri.nn.weights.ModelWeights` or any mapping
    from parameter path to tensor; when omitted the seeded default
    initialization is used.
    """
    model = VisionTransformer(config, seed=seed).to(image.dtype)
    if weights is not None:
        tensors = getattr(weights, "tensors", weights)
        model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    with torch.no_grad():
        layers = model.forward_layers(image)
    if image.dim() == 3:
        layers = [t[0] for t in layers]
    return layers


def tokens_to_map(tokens: torch.Tensor, grid: int) -> torch.Tensor:
    """Drop the class token and reshape ``(B, 1 + g*g, D)`` to ``(B, D, g, g)``."""
    patches = tokens[:, 1:]
    if patches.shape[1] != grid * grid:
        raise ShapeError(f"expected {grid * grid} patch tokens, got {patches.shape[1]}")
    return patches.transpose(1, 2).reshape(tokens.shape[0], -1, grid, grid)
