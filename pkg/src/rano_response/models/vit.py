"""3D vision transformer over non-overlapping cubic patches.

Inputs are zero-padded up to a multiple of the patch size, so any grid shape
is accepted. Patch tokens are mean-pooled for classification (no class token),
which keeps every token on the gradient path; ``grid`` re-exposes the final
tokens as a (B, hidden, d, h, w) map for Grad-CAM.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .base import VolumeClassifier


class TokenGrid(nn.Module):
    def forward(self, tokens: torch.Tensor, grid: tuple[int, int, int]) -> torch.Tensor:
        b, n, c = tokens.shape
        return tokens.transpose(1, 2).reshape(b, c, *grid)


class ViT3D(VolumeClassifier):
    default_cam_layer = "grid"

    def __init__(
        self,
        in_channels: int,
        image_shape: tuple[int, int, int],
        n_classes: int = 4,
        patch_size: int = 16,
        hidden: int = 384,
        depth: int = 6,
        heads: int = 6,
        mlp_ratio: float = 4.0,
        dropout: float = 0.0,
    ):
        super().__init__(in_channels, n_classes)
        self.patch_size = patch_size
        self.image_shape = tuple(int(s) for s in image_shape)
        self.token_grid = tuple(math.ceil(s / patch_size) for s in self.image_shape)
        n_tokens = math.prod(self.token_grid)
        self.patch_embed = nn.Conv3d(in_channels, hidden, kernel_size=patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, hidden))
        layer = nn.TransformerEncoderLayer(
            hidden, heads, int(hidden * mlp_ratio), dropout=dropout,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(hidden)
        self.grid = TokenGrid()
        self.feature_dim = hidden
        self.head = nn.Linear(hidden, n_classes)

    def forward_features(self, x):
        if tuple(x.shape[2:]) != self.image_shape:
            raise ValueError(f"ViT3D built for {self.image_shape}, got {tuple(x.shape[2:])}")
        pad = []
        for s in reversed(self.image_shape):
            pad += [0, (-s) % self.patch_size]
        x = F.pad(x, pad)
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        tokens = self.norm(self.encoder(tokens))
        fmap = self.grid(tokens, self.token_grid)
        return fmap.mean(dim=(2, 3, 4))
