"""Plain vision transformer backbone with tapped intermediate outputs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 16
    depth: int = 4
    width: int = 64
    heads: int = 4
    tap_layers: Sequence[int] = (1, 2, 3, 4)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.heads <= 0 or self.width % self.heads:
            raise ConfigurationError(f"width {self.width} not divisible by heads {self.heads}")
        if self.depth > 0:
            taps = self.tap_layers
            if len(taps) != 4:
                raise ConfigurationError("exactly 4 tap layers are required")
            if any(b <= a for a, b in zip(taps, taps[1:])):
                raise ConfigurationError("tap_layers must be strictly increasing")
            if taps[0] < 1 or taps[-1] > self.depth:
                raise ConfigurationError(f"tap_layers must lie in [1, {self.depth}]")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2


VIT_CONFIGS = {
    "toy": ViTConfig(64, 16, 4, 64, 4, (1, 2, 3, 4)),
    "small": ViTConfig(224, 16, 12, 384, 6, (3, 6, 9, 12)),
    "base": ViTConfig(224, 16, 12, 768, 12, (3, 6, 9, 12)),
    "large": ViTConfig(224, 16, 24, 1024, 16, (6, 12, 18, 24)),
}


def get_config(name: str) -> ViTConfig:
    try:
        return VIT_CONFIGS[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown ViT config {name!r}; choose from {sorted(VIT_CONFIGS)}")


class TokenSequence(NamedTuple):
    """Backbone output. Batched modules carry a leading batch axis on every field."""

    class_token: torch.Tensor
    patch_tokens: torch.Tensor
    taps: List[torch.Tensor]


def mhsa(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention, ``softmax(Q K^T / sqrt(d)) V``.

    Works on ``[..., N, d]`` tensors; the softmax runs over the key axis.
    """
    if Q.shape != K.shape or K.shape[:-1] != V.shape[:-1]:
        raise ConfigurationError(f"shape mismatch: Q{tuple(Q.shape)} K{tuple(K.shape)} V{tuple(V.shape)}")
    d = Q.shape[-1]
    if d <= 0:
        raise ConfigurationError("head dimension must be positive")
    for name, t in (("Q", Q), ("K", K), ("V", V)):
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite values in {name}")
    logits = Q @ K.transpose(-2, -1) / math.sqrt(d)
    return torch.softmax(logits, dim=-1) @ V


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        out = mhsa(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(B, N, C))


class Block(nn.Module):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """ViT returning the class token, patch tokens and four tapped block outputs.

    Images enter as ``[B, H, W, 3]`` in ``[0, 1]``. Masking, when requested, replaces
    patch projections by ``mask_token`` before positional embeddings are added.
    """

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        c, p = cfg.width, cfg.patch_size
        self.patch_proj = nn.Linear(p * p * 3, c)
        self.cls_token = nn.Parameter(torch.zeros(c))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches + 1, c))
        self.mask_token = nn.Parameter(torch.zeros(c))
        self.blocks = nn.ModuleList(Block(c, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(c)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.apply(_init_linear)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if images.dim() == 3:
            images = images.unsqueeze(0)
        B, H, W, C = images.shape
        if H != cfg.image_size or W != cfg.image_size or C != 3:
            raise ConfigurationError(
                f"expected images of shape [*, {cfg.image_size}, {cfg.image_size}, 3], got {tuple(images.shape)}"
            )
        g, p = cfg.grid, cfg.patch_size
        x = images.reshape(B, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, p * p * 3)

    def patch_embed(self, images: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Linear patch projection plus positional embedding, ``[B, n^2, c]``."""
        x = self.patch_proj(self.patchify(images))
        if mask is not None:
            from .mim import apply_mask

            x = apply_mask(x, mask, self.mask_token)
        return x + self.pos_embed[1:]

    def embed(self, images, mask=None) -> torch.Tensor:
        x = self.patch_embed(images, mask)
        cls = (self.cls_token + self.pos_embed[0]).expand(x.shape[0], 1, -1)
        return torch.cat([cls, x], dim=1)

    def forward_tokens(self, tokens: torch.Tensor, freeze_blocks: int = 0) -> TokenSequence:
        """Run the transformer blocks on ``[B, n^2+1, c]`` tokens (class token first)."""
        squeeze = tokens.dim() == 2
        x = tokens.unsqueeze(0) if squeeze else tokens
        taps = []
        tap_set = set(self.cfg.tap_layers)
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in tap_set:
                taps.append(x[:, 1:])
        if self.cfg.depth:
            x = self.norm(x)
        out = TokenSequence(x[:, 0], x[:, 1:], taps)
        if squeeze:
            out = TokenSequence(out.class_token[0], out.patch_tokens[0], [t[0] for t in taps])
        return out

    def forward(self, images: torch.Tensor, mask: Optional[torch.Tensor] = None) -> TokenSequence:
        return self.forward_tokens(self.embed(images, mask))

    def frozen_parameters(self, n_blocks: int):
        """Parameters excluded from optimization when the first ``n_blocks`` are frozen."""
        if not 0 <= n_blocks <= self.cfg.depth:
            raise ConfigurationError(f"freeze_blocks must lie in [0, {self.cfg.depth}]")
        if n_blocks == 0:
            return []
        params = [self.patch_proj.weight, self.patch_proj.bias, self.cls_token, self.pos_embed, self.mask_token]
        for blk in self.blocks[:n_blocks]:
            params.extend(blk.parameters())
        if n_blocks == self.cfg.depth:
            params.extend(self.norm.parameters())
        return params


def _init_linear(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def to_tensor(images, dtype=None) -> torch.Tensor:
    t = torch.as_tensor(images)
    if dtype is not None:
        t = t.to(dtype)
    elif not t.is_floating_point():
        t = t.float()
    return t


__all__ = [
    "ViTConfig",
    "VIT_CONFIGS",
    "get_config",
    "TokenSequence",
    "mhsa",
    "Block",
    "VisionTransformer",
]
