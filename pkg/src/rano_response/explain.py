"""Grad-CAM and saliency attributions plus overlay figures."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .cohort import CLASS_ORDER
from .models.base import VolumeClassifier
from .volume import VolumeGrid, save_volume


class AttributionMethod(str, enum.Enum):
    GradCAM = "GradCAM"
    Saliency = "Saliency"


class Normalization(str, enum.Enum):
    raw = "raw"
    minmax = "minmax"


class LayerError(ValueError):
    pass


class AttributionError(RuntimeError):
    pass


@dataclass
class AttributionVolume:
    values: np.ndarray
    method: AttributionMethod
    target_class: int
    normalization: Normalization = Normalization.raw
    target_mode: str = "explicit"  # explicit, predicted or ground_truth
    channel: str | None = None
    layer: str | None = None

    def normalized(self) -> "AttributionVolume":
        return AttributionVolume(
            _minmax(self.values), self.method, self.target_class, Normalization.minmax,
            self.target_mode, self.channel, self.layer,
        )


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _as_batch(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if t.ndim == 4:
        t = t[None]
    if t.ndim != 5 or t.shape[0] != 1:
        raise ValueError(f"expected one (C, D, H, W) input, got shape {tuple(t.shape)}")
    return t


def _as_clinical(clinical) -> torch.Tensor | None:
    if clinical is None:
        return None
    c = torch.as_tensor(np.asarray(clinical, dtype=np.float32))
    return c[None] if c.ndim == 1 else c


def resolve_target(model: VolumeClassifier, x, target, clinical=None) -> tuple[int, str]:
    """``target`` is a class index, a RANO label, ``"predicted"`` or ``("ground_truth", idx)``."""
    if isinstance(target, str) and target == "predicted":
        with torch.no_grad():
            logits = model(_as_batch(x), _as_clinical(clinical))
        return int(logits.argmax(1)), "predicted"
    if isinstance(target, tuple) and target[0] == "ground_truth":
        return int(target[1]), "ground_truth"
    if hasattr(target, "index") and not isinstance(target, (int, np.integer)):
        return int(target.index), "explicit"
    return int(target), "explicit"


def spatial_layers(model: VolumeClassifier, input_shape: Sequence[int]) -> list[str]:
    """Names of modules whose output is a 5D (batch, C, D, H, W) tensor."""
    found: list[str] = []
    hooks = []
    for name, module in model.named_modules():
        if not name:
            continue
        def hook(_m, _i, out, name=name):
            if isinstance(out, torch.Tensor) and out.ndim == 5 and name not in found:
                found.append(name)
        hooks.append(module.register_forward_hook(hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            clin = torch.zeros(1, model.clinical_dim) if model.clinical_dim else None
            model(torch.zeros(1, *input_shape), clin)
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return found


def grad_cam(
    model: VolumeClassifier,
    x,
    target_class=None,
    layer: str | None = None,
    clinical=None,
    normalization: Normalization | str = Normalization.raw,
) -> AttributionVolume:
    """Rectified gradient-weighted sum of a layer's feature maps.

    Channel weights are the spatially averaged gradients of the target logit.
    The map is trilinearly upsampled to the input grid. ``target_class`` of
    None means the predicted class.
    """
    normalization = Normalization(normalization)
    xb = _as_batch(x)
    layer = layer or model.default_cam_layer
    modules = dict(model.named_modules())
    if layer not in modules:
        raise LayerError(f"unknown layer {layer!r}; spatial layers: {spatial_layers(model, xb.shape[1:])}")
    target, mode = resolve_target(model, x, "predicted" if target_class is None else target_class, clinical)

    captured: dict[str, torch.Tensor] = {}

    def hook(_m, _i, out):
        captured["a"] = out

    handle = modules[layer].register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(xb, _as_clinical(clinical))
            act = captured.get("a")
            if not isinstance(act, torch.Tensor) or act.ndim != 5:
                raise LayerError(
                    f"layer {layer!r} has no spatial extent; spatial layers: {spatial_layers(model, xb.shape[1:])}"
                )
            if not act.requires_grad:
                cam = torch.zeros(1, 1, *act.shape[2:])
            else:
                (grad,) = torch.autograd.grad(logits[0, target], act, allow_unused=True)
                if grad is None:
                    grad = torch.zeros_like(act)
                weights = grad.mean(dim=(2, 3, 4), keepdim=True)
                cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    finally:
        handle.remove()
        model.train(was_training)
    up = F.interpolate(cam.detach(), size=tuple(xb.shape[2:]), mode="trilinear", align_corners=False)
    values = up[0, 0].numpy().astype(np.float64)
    values = np.maximum(values, 0.0)
    if not np.all(np.isfinite(values)):
        raise AttributionError(f"non-finite Grad-CAM values at layer {layer!r}")
    vol = AttributionVolume(values, AttributionMethod.GradCAM, target, Normalization.raw, mode, layer=layer)
    return vol.normalized() if normalization is Normalization.minmax else vol


def input_gradient(model: VolumeClassifier, x, target_class: int, clinical=None) -> np.ndarray:
    """Gradient of the target logit with respect to the input, shape (C, D, H, W)."""
    xb = _as_batch(x).clone().requires_grad_(True)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(xb, _as_clinical(clinical))
            (grad,) = torch.autograd.grad(logits[0, int(target_class)], xb)
    finally:
        model.train(was_training)
    g = grad[0].numpy().astype(np.float64)
    if not np.all(np.isfinite(g)):
        bad = int((~np.isfinite(g)).sum())
        raise AttributionError(f"{bad} non-finite input gradients for class {target_class}")
    return g


def saliency(
    model: VolumeClassifier,
    x,
    target_class=None,
    clinical=None,
    signed: bool = False,
    channel_names: Sequence[str] | None = None,
    normalization: Normalization | str = Normalization.raw,
) -> list[AttributionVolume]:
    """Per-channel absolute (or signed) input gradient at native resolution."""
    normalization = Normalization(normalization)
    target, mode = resolve_target(model, x, "predicted" if target_class is None else target_class, clinical)
    g = input_gradient(model, x, target, clinical)
    if not signed:
        g = np.abs(g)
    names = list(channel_names) if channel_names is not None else [f"ch{i}" for i in range(g.shape[0])]
    out = []
    for name, values in zip(names, g):
        vol = AttributionVolume(values, AttributionMethod.Saliency, target, Normalization.raw, mode, channel=name)
        out.append(vol.normalized() if normalization is Normalization.minmax else vol)
    return out


def top_fraction_mask(values: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    """Boolean mask of the ``fraction`` highest-valued voxels (ties by position)."""
    flat = np.asarray(values).ravel()
    k = max(1, int(np.ceil(fraction * flat.size)))
    order = np.argsort(-flat, kind="stable")[:k]
    mask = np.zeros(flat.size, dtype=bool)
    mask[order] = True
    return mask.reshape(np.shape(values))


def dice_overlap(a: np.ndarray, b: np.ndarray, fraction: float = 0.1) -> float:
    """Dice coefficient between the top-``fraction`` masks of two maps.

    NaN when either map is constant, since its top voxels are then undefined.
    """
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    ma, mb = top_fraction_mask(a, fraction), top_fraction_mask(b, fraction)
    denom = ma.sum() + mb.sum()
    return float(2.0 * (ma & mb).sum() / denom) if denom else 0.0


def _caption(probabilities: Sequence[float] | None, attr: AttributionVolume) -> str:
    parts = [f"{attr.method.value} | target {CLASS_ORDER[attr.target_class].value} ({attr.target_mode})"]
    if probabilities is not None:
        parts.append("  ".join(f"{c.value}: {p:.3f}" for c, p in zip(CLASS_ORDER, probabilities)))
    return "\n".join(parts)


def render_overlay(
    reference: VolumeGrid | np.ndarray,
    attr: AttributionVolume,
    slices: Sequence[int],
    path: str | Path,
    probabilities: Sequence[float] | None = None,
    title: str | None = None,
) -> Path:
    """Axial slices of ``reference`` with the attribution heatmap on top.

    Zero-valued attribution voxels are left transparent, so an all-zero map
    shows only the reference image.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ref = reference.voxels if isinstance(reference, VolumeGrid) else np.asarray(reference)
    if ref.shape != attr.values.shape:
        raise ValueError(f"reference shape {ref.shape} differs from attribution shape {attr.values.shape}")
    depth = ref.shape[2]
    bad = [s for s in slices if not 0 <= s < depth]
    if bad:
        raise IndexError(f"axial slices {bad} outside 0..{depth - 1}")
    if not slices:
        raise ValueError("no slices requested")

    vmax = float(attr.values.max()) if attr.values.max() > 0 else 1.0
    fig, axes = plt.subplots(1, len(slices), figsize=(3.2 * len(slices) + 0.8, 3.8), squeeze=False)
    im = None
    for ax, k in zip(axes[0], slices):
        ax.imshow(ref[:, :, k].T, cmap="gray", origin="lower")
        heat = np.ma.masked_where(attr.values[:, :, k] <= 0, attr.values[:, :, k])
        im = ax.imshow(heat.T, cmap="jet", alpha=0.5, origin="lower", vmin=0.0, vmax=vmax)
        ax.set_title(f"slice {k}", fontsize=9)
        ax.axis("off")
    fig.colorbar(im, ax=axes[0].tolist(), fraction=0.025, pad=0.02)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.text(0.5, 0.02, _caption(probabilities, attr), ha="center", fontsize=8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def evenly_spaced_slices(depth: int, n: int = 3) -> list[int]:
    return [int(round(v)) for v in np.linspace(0, depth - 1, n + 2)[1:-1]]


def save_attribution(attr: AttributionVolume, reference: VolumeGrid, path: str | Path) -> Path:
    """Write the attribution as NIfTI on the reference (template) grid."""
    if reference.voxels.shape != attr.values.shape:
        raise ValueError("attribution and reference grids differ")
    out = reference.with_voxels(attr.values.astype(np.float32))
    out.meta = {**out.meta, "attribution": attr.method.value, "target_class": attr.target_class}
    save_volume(out, path)
    return Path(path)


PROBABILITY_COLUMNS = ("sample_id", "true_label", "predicted", *(f"p_{c.value}" for c in CLASS_ORDER), "dice_top_decile")


def write_probability_table(rows: Sequence[dict], path: str | Path) -> Path:
    """Per-sample class probabilities, one TSV row per explained sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PROBABILITY_COLUMNS, delimiter="\t", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return path
