"""AlexNet with every 2D operator replaced by its 3D counterpart.

Layer table (kernel / stride / padding):

    conv1   64 @ 11 / 4 / 2    relu1   pool1  max 3 / 2 / 1
    conv2  192 @  5 / 1 / 2    relu2   pool2  max 3 / 2 / 1
    conv3  384 @  3 / 1 / 1    relu3
    conv4  256 @  3 / 1 / 1    relu4
    conv5  256 @  3 / 1 / 1    relu5   pool5  max 3 / 2 / 1
    adaptive average pool to 3x3x3
    dropout 0.5 - fc 4096 - relu - dropout 0.5 - fc 4096 - relu - head

Pools carry one voxel of padding (the 2D original has none) so that small
volumes still reach the classifier; the adaptive pool is 3^3 rather than 6^3
to keep the first fully connected layer at ~28M weights.
"""

from __future__ import annotations

from collections import OrderedDict

from torch import nn

from .base import VolumeClassifier


class AlexNet3D(VolumeClassifier):
    default_cam_layer = "features.relu5"

    def __init__(self, in_channels: int, n_classes: int = 4, hidden: int = 4096, dropout: float = 0.5):
        super().__init__(in_channels, n_classes)
        self.features = nn.Sequential(OrderedDict(
            conv1=nn.Conv3d(in_channels, 64, kernel_size=11, stride=4, padding=2),
            relu1=nn.ReLU(inplace=False),
            pool1=nn.MaxPool3d(kernel_size=3, stride=2, padding=1),
            conv2=nn.Conv3d(64, 192, kernel_size=5, padding=2),
            relu2=nn.ReLU(inplace=False),
            pool2=nn.MaxPool3d(kernel_size=3, stride=2, padding=1),
            conv3=nn.Conv3d(192, 384, kernel_size=3, padding=1),
            relu3=nn.ReLU(inplace=False),
            conv4=nn.Conv3d(384, 256, kernel_size=3, padding=1),
            relu4=nn.ReLU(inplace=False),
            conv5=nn.Conv3d(256, 256, kernel_size=3, padding=1),
            relu5=nn.ReLU(inplace=False),
            pool5=nn.MaxPool3d(kernel_size=3, stride=2, padding=1),
        ))
        self.avgpool = nn.AdaptiveAvgPool3d(3)
        self.classifier = nn.Sequential(
            nn.Dropout(dropout),
            nn.Linear(256 * 27, hidden),
            nn.ReLU(inplace=False),
            nn.Dropout(dropout),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=False),
        )
        self.feature_dim = hidden
        self.head = nn.Linear(hidden, n_classes)

    def forward_features(self, x):
        return self.classifier(self.avgpool(self.features(x)).flatten(1))
