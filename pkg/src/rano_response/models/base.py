from __future__ import annotations

import torch
from torch import nn


class ClinicalInputError(ValueError):
    pass


class VolumeClassifier(nn.Module):
    """Backbone producing a pooled feature vector plus a linear class head.

    Subclasses implement :meth:`forward_features` and set ``feature_dim`` and
    ``default_cam_layer``. When ``clinical_dim > 0`` a clinical vector is
    concatenated to the pooled features before the head.
    """

    default_cam_layer: str = ""

    def __init__(self, in_channels: int, n_classes: int = 4):
        super().__init__()
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.clinical_dim = 0

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor, clinical: torch.Tensor | None = None) -> torch.Tensor:
        feats = self.forward_features(x)
        if self.clinical_dim:
            if clinical is None:
                raise ClinicalInputError("model expects a clinical vector")
            if clinical.ndim != 2 or clinical.shape[1] != self.clinical_dim:
                raise ClinicalInputError(
                    f"clinical vector has shape {tuple(clinical.shape)}, expected (batch, {self.clinical_dim})"
                )
            feats = torch.cat([feats, clinical.to(feats.dtype)], dim=1)
        return self.head(feats)

    def reset_head(self, n_classes: int | None = None) -> None:
        n_classes = n_classes or self.n_classes
        self.n_classes = n_classes
        self.head = nn.Linear(self.feature_dim + self.clinical_dim, n_classes)
        nn.init.xavier_normal_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def backbone_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("head.")}
