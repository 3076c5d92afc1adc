"""3D DenseNet (121/169/264 layer configurations)."""

from __future__ import annotations

from collections import OrderedDict

import torch
import torch.nn.functional as F
from torch import nn

from .base import VolumeClassifier

BLOCK_CONFIGS = {
    121: (6, 12, 24, 16),
    169: (6, 12, 32, 32),
    264: (6, 12, 64, 48),
}


class _DenseLayer(nn.Module):
    def __init__(self, in_channels: int, growth_rate: int, bn_size: int):
        super().__init__()
        mid = bn_size * growth_rate
        self.layers = nn.Sequential(
            nn.BatchNorm3d(in_channels),
            nn.ReLU(inplace=False),
            nn.Conv3d(in_channels, mid, kernel_size=1, bias=False),
            nn.BatchNorm3d(mid),
            nn.ReLU(inplace=False),
            nn.Conv3d(mid, growth_rate, kernel_size=3, padding=1, bias=False),
        )

    def forward(self, x):
        return torch.cat([x, self.layers(x)], dim=1)


class _DenseBlock(nn.Sequential):
    def __init__(self, n_layers: int, in_channels: int, growth_rate: int, bn_size: int):
        super().__init__()
        for i in range(n_layers):
            self.add_module(f"denselayer{i + 1}", _DenseLayer(in_channels + i * growth_rate, growth_rate, bn_size))


class _HalvingAvgPool(nn.Module):
    """2x average pooling whose kernel shrinks on axes shorter than 2 voxels."""

    def forward(self, x):
        k = [min(2, s) for s in x.shape[2:]]
        return F.avg_pool3d(x, kernel_size=k, stride=k, ceil_mode=True)


class _Transition(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.add_module("norm", nn.BatchNorm3d(in_channels))
        self.add_module("relu", nn.ReLU(inplace=False))
        self.add_module("conv", nn.Conv3d(in_channels, out_channels, kernel_size=1, bias=False))
        self.add_module("pool", _HalvingAvgPool())


class DenseNet3D(VolumeClassifier):
    default_cam_layer = "features.denseblock4"

    def __init__(
        self,
        in_channels: int,
        n_classes: int = 4,
        depth: int = 121,
        growth_rate: int = 32,
        init_features: int = 64,
        bn_size: int = 4,
    ):
        super().__init__(in_channels, n_classes)
        blocks = BLOCK_CONFIGS[depth]
        self.depth = depth
        layers = OrderedDict(
            conv0=nn.Conv3d(in_channels, init_features, kernel_size=7, stride=2, padding=3, bias=False),
            norm0=nn.BatchNorm3d(init_features),
            relu0=nn.ReLU(inplace=False),
            pool0=nn.MaxPool3d(kernel_size=3, stride=2, padding=1),
        )
        ch = init_features
        for i, n_layers in enumerate(blocks):
            layers[f"denseblock{i + 1}"] = _DenseBlock(n_layers, ch, growth_rate, bn_size)
            ch += n_layers * growth_rate
            if i != len(blocks) - 1:
                layers[f"transition{i + 1}"] = _Transition(ch, ch // 2)
                ch //= 2
        layers["norm5"] = nn.BatchNorm3d(ch)
        self.features = nn.Sequential(layers)
        self.relu = nn.ReLU(inplace=False)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.feature_dim = ch
        self.head = nn.Linear(ch, n_classes)

    def forward_features(self, x):
        return self.pool(self.relu(self.features(x))).flatten(1)
