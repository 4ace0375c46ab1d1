"""Pyramid-fusion pixel decoder and masked L1 reconstruction loss."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvariantError


def default_widths(width: int):
    """Decoder channel widths for T^0..T^4 (the last is RGB)."""
    return (width, max(width // 2, 8), max(width // 4, 8), max(width // 8, 8), 3)


class PyramidDecoder(nn.Module):
    """Four fuse-and-upsample stages from the token grid back to image resolution.

    ``T^0`` is a per-token linear projection of the first tap. Stage ``i``
    produces ``T^{i+1} = TConv(Linear(Concat[T^i, L^i]))`` where ``L^1..L^3`` are
    the remaining taps; stage 0 has nothing to concatenate since ``T^0`` already
    carries the first tap.
    """

    def __init__(self, width: int, grid: int, widths: Sequence[int] = None):
        super().__init__()
        self.grid = grid
        self.widths = tuple(widths or default_widths(width))
        w = self.widths
        self.seed = nn.Linear(width, w[0])
        self.fuse = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in range(4):
            in_ch = w[i] + (width if i > 0 else 0)
            self.fuse.append(nn.Conv2d(in_ch, w[i], kernel_size=1))
            self.up.append(nn.ConvTranspose2d(w[i], w[i + 1], kernel_size=4, stride=2, padding=1))

    def tokens_to_grid(self, tokens: torch.Tensor) -> torch.Tensor:
        B, N, C = tokens.shape
        if N != self.grid**2:
            raise InvariantError(f"expected {self.grid ** 2} tokens, got {N}")
        return tokens.transpose(1, 2).reshape(B, C, self.grid, self.grid)

    def fuse_upsample(self, stage: int, T: torch.Tensor, L: torch.Tensor = None) -> torch.Tensor:
        """One stage on channel-first maps ``T [B, c_i, h, w]`` and tokens ``L [B, n^2, c]``."""
        if L is not None:
            Lg = self.tokens_to_grid(L)
            if Lg.shape[-2:] != T.shape[-2:]:
                Lg = F.interpolate(Lg, size=T.shape[-2:], mode="nearest")
            if Lg.shape[-2:] != T.shape[-2:]:
                raise InvariantError("spatial mismatch after resampling")
            T = torch.cat([T, Lg], dim=1)
        return self.up[stage](self.fuse[stage](T))

    def forward(self, taps: Sequence[torch.Tensor]) -> torch.Tensor:
        """Decode four ``[B, n^2, c]`` taps into ``[B, H, W, 3]``."""
        if len(taps) != 4:
            raise InvariantError("decoder needs exactly 4 taps")
        T = self.tokens_to_grid(self.seed(taps[0]))
        T = self.fuse_upsample(0, T)
        for i in range(1, 4):
            T = self.fuse_upsample(i, T, taps[i])
        return T.permute(0, 2, 3, 1)


def pixel_mask(token_mask, grid: int, patch_size: int):
    """Lift a token mask ``[..., grid^2]`` to a pixel mask ``[..., H, W]`` by block replication."""
    m = torch.as_tensor(np.asarray(token_mask), dtype=torch.bool)
    m = m.reshape(*m.shape[:-1], grid, grid)
    return m.repeat_interleave(patch_size, dim=-2).repeat_interleave(patch_size, dim=-1)


def recon_loss(T4: torch.Tensor, x: torch.Tensor, token_mask, patch_size: int) -> torch.Tensor:
    """Mean absolute error over masked pixels and channels; 0 when nothing is masked.

    ``T4`` and ``x`` are ``[..., H, W, 3]``; ``token_mask`` is ``[..., n^2]``.
    """
    token_mask = getattr(token_mask, "mask", token_mask)
    x = torch.as_tensor(x, dtype=T4.dtype)
    grid = T4.shape[-2] // patch_size
    pm = pixel_mask(token_mask, grid, patch_size).to(T4.device)
    pm = pm.expand(T4.shape[:-1])
    n = int(pm.sum()) * T4.shape[-1]
    if n == 0:
        return T4.sum() * 0.0
    diff = (T4 - x).abs() * pm[..., None]
    return diff.sum() / n
