"""Architecture registry, input assembly and checkpoint handling.

Channel order is modality-major in CT1, T1W, T2W, FLAIR order with the earlier
timepoint first: ``[CT1_prev, CT1_curr, T1W_prev, T1W_curr, ...]``. With
subtraction each modality contributes a single ``curr - prev`` channel.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from ..clinical import CLINICAL_DIM
from ..cohort import ModalitySet, StudySample, canonical_modalities, modality_key
from .alexnet import AlexNet3D
from .base import ClinicalInputError, VolumeClassifier
from .densenet import DenseNet3D
from .vit import ViT3D


class ArchitectureId(str, enum.Enum):
    Densenet121 = "Densenet121"
    Densenet169 = "Densenet169"
    Densenet264 = "Densenet264"
    ViT3D = "ViT3D"
    AlexNet3D = "AlexNet3D"


@dataclass(frozen=True)
class InputSpec:
    modalities: ModalitySet
    use_subtraction: bool = False
    use_clinical: bool = False
    clinical_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", canonical_modalities(self.modalities))
        if self.use_clinical and self.clinical_dim == 0:
            object.__setattr__(self, "clinical_dim", CLINICAL_DIM)
        if not self.use_clinical:
            object.__setattr__(self, "clinical_dim", 0)

    @property
    def channel_count(self) -> int:
        n = len(self.modalities)
        return n if self.use_subtraction else 2 * n

    def channel_names(self) -> list[str]:
        if self.use_subtraction:
            return [f"{m.value}_diff" for m in self.modalities]
        return [f"{m.value}_{t}" for m in self.modalities for t in ("prev", "curr")]

    def to_dict(self) -> dict:
        return {
            "modalities": modality_key(self.modalities),
            "use_subtraction": self.use_subtraction,
            "use_clinical": self.use_clinical,
            "clinical_dim": self.clinical_dim,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "InputSpec":
        mods = d["modalities"]
        if isinstance(mods, str):
            mods = mods.split("+")
        return cls(canonical_modalities(mods), bool(d["use_subtraction"]), bool(d["use_clinical"]), int(d.get("clinical_dim", 0)))


class MissingVolumeError(RuntimeError):
    pass


def assemble_input(
    sample: StudySample,
    spec: InputSpec,
    load: Callable[[str], np.ndarray],
    clinical: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Stack the preprocessed volumes of ``sample`` into a (C, D, H, W) array.

    ``load`` maps an original image path to its preprocessed voxel array. The
    label of the sample is never read.
    """
    channels = []
    for m in spec.modalities:
        try:
            prev = np.asarray(load(sample.prev.image_paths[m]), dtype=np.float32)
            curr = np.asarray(load(sample.curr.image_paths[m]), dtype=np.float32)
        except (KeyError, FileNotFoundError) as exc:
            raise MissingVolumeError(f"{sample.id}: no preprocessed {m.value} volume ({exc})") from exc
        if prev.shape != curr.shape:
            raise MissingVolumeError(f"{sample.id}: {m.value} timepoints differ in shape")
        if spec.use_subtraction:
            channels.append(curr - prev)
        else:
            channels.extend([prev, curr])
    x = np.stack(channels, axis=0)
    if spec.use_clinical:
        if clinical is None:
            raise ClinicalInputError(f"{sample.id}: clinical vector required")
        clinical = np.asarray(clinical, dtype=np.float32)
        if clinical.shape != (spec.clinical_dim,):
            raise ClinicalInputError(f"{sample.id}: clinical vector length {clinical.shape} != {spec.clinical_dim}")
        return x, clinical
    return x, None


def xavier_init(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            nn.init.xavier_normal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm3d, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.MultiheadAttention):
            nn.init.xavier_normal_(m.in_proj_weight)
            nn.init.zeros_(m.in_proj_bias)
    for name, p in model.named_parameters():
        if name.endswith("pos_embed"):
            nn.init.normal_(p, std=0.02)


def _construct(arch: ArchitectureId, channels: int, image_shape, **kwargs) -> VolumeClassifier:
    if arch is ArchitectureId.Densenet121:
        return DenseNet3D(channels, depth=121, **kwargs)
    if arch is ArchitectureId.Densenet169:
        return DenseNet3D(channels, depth=169, **kwargs)
    if arch is ArchitectureId.Densenet264:
        return DenseNet3D(channels, depth=264, **kwargs)
    if arch is ArchitectureId.AlexNet3D:
        return AlexNet3D(channels, **kwargs)
    if arch is ArchitectureId.ViT3D:
        if image_shape is None:
            raise ValueError("ViT3D needs the input grid shape")
        return ViT3D(channels, tuple(image_shape), **kwargs)
    raise ValueError(f"unknown architecture {arch!r}")


def build_model(
    arch: ArchitectureId | str,
    spec: InputSpec,
    init_seed: int = 0,
    image_shape: Sequence[int] | None = None,
    **kwargs,
) -> VolumeClassifier:
    """Instantiate an architecture with Xavier-normal weights drawn from ``init_seed``."""
    try:
        arch = ArchitectureId(arch)
    except ValueError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {[a.value for a in ArchitectureId]}") from None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = _construct(arch, spec.channel_count, image_shape, **kwargs)
        xavier_init(model)
        if spec.use_clinical:
            fuse_clinical(model, spec.clinical_dim)
    model.arch = arch
    model.init_seed = init_seed
    model.model_kwargs = dict(kwargs)
    return model


def fuse_clinical(model: VolumeClassifier, clinical_dim: int) -> VolumeClassifier:
    """Widen the head so a clinical vector joins the pooled image features."""
    if clinical_dim < 0:
        raise ValueError("clinical_dim must be nonnegative")
    if clinical_dim == 0:
        return model
    model.clinical_dim = clinical_dim
    model.reset_head()
    return model


@dataclass(frozen=True)
class ModelOutput:
    logits: np.ndarray
    probabilities: np.ndarray

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "ModelOutput":
        logits = logits.detach().double()
        return cls(logits.numpy(), torch.softmax(logits, dim=-1).numpy())

    @property
    def predicted(self) -> np.ndarray:
        return self.logits.argmax(axis=-1)


def weight_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


CHECKPOINT_FIELDS = ("arch", "input_spec", "init_seed", "config_hash", "fold")


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    model: VolumeClassifier,
    spec: InputSpec,
    config_hash: str,
    fold: int,
    image_shape: Sequence[int] | None = None,
    state_dict: Mapping | None = None,
    extra: Mapping | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "arch": ArchitectureId(model.arch).value,
        "input_spec": spec.to_dict(),
        "init_seed": int(model.init_seed),
        "config_hash": config_hash,
        "fold": int(fold),
        "image_shape": list(image_shape) if image_shape is not None else None,
        "model_kwargs": dict(getattr(model, "model_kwargs", {})),
        "state_dict": dict(state_dict if state_dict is not None else model.state_dict()),
        "extra": dict(extra or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[VolumeClassifier, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    missing = [f for f in CHECKPOINT_FIELDS if payload.get(f) is None]
    if missing or "state_dict" not in payload:
        raise CheckpointError(f"{path}: checkpoint lacks required fields {missing or ['state_dict']}")
    spec = InputSpec.from_dict(payload["input_spec"])
    model = build_model(payload["arch"], spec, payload["init_seed"], payload.get("image_shape"),
                        **payload.get("model_kwargs", {}))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    meta["input_spec"] = spec
    return model, meta


__all__ = [
    "AlexNet3D",
    "ArchitectureId",
    "CheckpointError",
    "ClinicalInputError",
    "DenseNet3D",
    "InputSpec",
    "MissingVolumeError",
    "ModelOutput",
    "ViT3D",
    "VolumeClassifier",
    "assemble_input",
    "build_model",
    "fuse_clinical",
    "load_checkpoint",
    "parameter_count",
    "save_checkpoint",
    "weight_hash",
]
