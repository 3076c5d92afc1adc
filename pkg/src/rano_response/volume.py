"""3D volume container and NIfTI I/O."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import nibabel as nib
import numpy as np
from nibabel import orientations as ornt


class SpaceTag(str, enum.Enum):
    native = "native"
    template = "template"


@dataclass
class VolumeGrid:
    """A scalar 3D image with voxel spacing, axis orientation and origin.

    ``orientation`` is a three-letter axis code (``"RAS"``, ``"LPS"``...); each
    letter names the world direction voxel indices increase towards. ``origin``
    is the world position (mm) of voxel (0, 0, 0).
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: str | None = "RAS"
    space_tag: SpaceTag = SpaceTag.native
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    source: str = "<memory>"
    flags: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"{self.source}: expected a 3D volume, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        self.space_tag = SpaceTag(self.space_tag)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def affine(self) -> np.ndarray:
        """Voxel-to-world (RAS+ mm) matrix implied by orientation/spacing/origin."""
        if self.orientation is None:
            raise ValueError(f"{self.source}: orientation metadata missing")
        axes = ornt.axcodes2ornt(tuple(self.orientation))
        aff = np.zeros((4, 4))
        for i, (world_axis, sign) in enumerate(axes):
            aff[int(world_axis), i] = sign * self.spacing[i]
        aff[:3, 3] = self.origin
        aff[3, 3] = 1.0
        return aff

    def with_voxels(self, voxels: np.ndarray, **changes) -> "VolumeGrid":
        return replace(self, voxels=voxels, flags=list(self.flags), meta=dict(self.meta), **changes)


def load_volume(path: str | Path) -> VolumeGrid:
    img = nib.load(str(path))
    data = np.asarray(img.dataobj, dtype=np.float32)
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    aff = img.affine
    code = "".join(nib.aff2axcodes(aff)) if aff is not None else None
    if code is not None and None in nib.aff2axcodes(aff):
        code = None
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return VolumeGrid(
        voxels=data,
        spacing=spacing,
        orientation=code,
        origin=tuple(float(x) for x in aff[:3, 3]),
        source=str(path),
    )


def save_volume(vol: VolumeGrid, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(np.asarray(vol.voxels, dtype=np.float32), vol.affine)
    img.header.set_xyzt_units("mm")
    if vol.space_tag is SpaceTag.template:
        img.header["descrip"] = b"template"
    nib.save(img, str(path))
    return path
