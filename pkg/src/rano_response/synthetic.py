"""Synthetic longitudinal cohorts laid out like the real dataset.

Two generators:

* :func:`make_census_fixture` reproduces the dataset's census (91 patients, 638
  sessions, 253/97/20/27 PD/SD/PR/CR labels, 366 sessions surviving the
  timepoint filter) with placeholder image files. It exercises indexing and
  filtering at full scale without any pixel data.
* :func:`make_synthetic_cohort` writes small real NIfTI volumes in which a
  tumour blob grows, persists, shrinks or vanishes according to the label of
  each session, so a classifier has something to learn.

Both return a :class:`SyntheticTruth` enumerating what was written.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cohort import MODALITY_ORDER, Modality, RanoLabel, canonical_modalities
from .volume import SpaceTag, VolumeGrid, save_volume


@dataclass(frozen=True)
class SessionTruth:
    patient_id: str
    week: int
    label: RanoLabel
    modalities: tuple[Modality, ...]


@dataclass
class SyntheticTruth:
    root: Path
    metadata: Path
    clinical: Path
    sessions: list[SessionTruth]
    surgery_weeks: dict[str, int | None]
    template: Path | None = None
    extra: dict = field(default_factory=dict)


def _write_tables(root: Path, sessions: Sequence[SessionTruth], surgery: dict, rng) -> tuple[Path, Path]:
    meta = root / "metadata.csv"
    with meta.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient", "week", "rating", "surgery_week", "scanner"])
        for s in sessions:
            sw = surgery.get(s.patient_id)
            label = "" if s.label is RanoLabel.Unlabeled else s.label.value
            w.writerow([s.patient_id, s.week, label, "" if sw is None else sw, "synthetic"])
    clin = root / "clinical.csv"
    with clin.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient", "age_at_surgery", "sex", "idh", "mgmt", "survival_weeks"])
        for pid in sorted(surgery):
            w.writerow([
                pid,
                round(float(rng.normal(62, 10)), 1),
                rng.choice(["M", "F"]),
                rng.choice(["wildtype", "IDH1 negative", "mutant", "NA"], p=[0.63, 0.11, 0.01, 0.25]),
                rng.choice(["methylated", "not methylated", "NA"], p=[0.41, 0.47, 0.12]),
                int(max(5, rng.normal(83, 47))),
            ])
    return meta, clin


def _session_dir(root: Path, s: SessionTruth) -> Path:
    d = root / s.patient_id / f"week-{s.week:03d}" if s.week >= 0 else root / s.patient_id / f"week-{s.week}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def make_census_fixture(root: str | Path, seed: int = 0) -> SyntheticTruth:
    """Placeholder-image tree matching the published dataset census."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    n_patients = 91
    pids = [f"Patient-{i:03d}" for i in range(1, n_patients + 1)]

    labels = [RanoLabel.PD] * 253 + [RanoLabel.SD] * 97 + [RanoLabel.PR] * 20 + [RanoLabel.CR] * 27
    rng.shuffle(labels)
    n_labeled = len(labels)
    n_unlabeled = 638 - n_labeled - 2 * n_patients

    per_patient: dict[str, list[RanoLabel]] = {p: [] for p in pids}
    for i, lab in enumerate(labels):
        per_patient[pids[i % n_patients]].append(lab)
    for i in range(n_unlabeled):
        per_patient[pids[rng.integers(n_patients)]].append(RanoLabel.Unlabeled)

    # 25 patients get their first labelled session inside the 13-week window,
    # and 6 later labelled sessions carry no image files: 397 - 25 - 6 = 366.
    early = set(rng.choice(n_patients, size=25, replace=False).tolist())
    sessions: list[SessionTruth] = []
    empty_candidates: list[int] = []
    for pi, pid in enumerate(pids):
        sessions.append(SessionTruth(pid, -1, RanoLabel.PreOp, MODALITY_ORDER))
        sessions.append(SessionTruth(pid, 0, RanoLabel.PostOp, MODALITY_ORDER))
        labs = per_patient[pid]
        rng.shuffle(labs)
        if pi in early:
            first = next(i for i, lab in enumerate(labs) if lab.trainable)
            labs.insert(0, labs.pop(first))
        week = int(rng.integers(2, 13)) if pi in early else int(rng.integers(13, 20))
        first_labeled = True
        for lab in labs:
            if lab.trainable and first_labeled and pi in early:
                assert week < 13
            elif week < 13:
                week = 13 + int(rng.integers(0, 4))
            mods = tuple(m for m in MODALITY_ORDER if rng.random() < 0.85) or (Modality.FLAIR,)
            if lab.trainable and not (first_labeled and pi in early):
                empty_candidates.append(len(sessions))
            if lab.trainable:
                first_labeled = False
            sessions.append(SessionTruth(pid, week, lab, mods))
            week += int(rng.integers(4, 16))
    for idx in rng.choice(empty_candidates, size=6, replace=False):
        s = sessions[idx]
        sessions[idx] = SessionTruth(s.patient_id, s.week, s.label, ())

    surgery = {pid: 0 for pid in pids}
    for s in sessions:
        d = _session_dir(root, s)
        for m in s.modalities:
            (d / f"{m.value}.nii.gz").touch()
    meta, clin = _write_tables(root, sessions, surgery, rng)
    return SyntheticTruth(root, meta, clin, sessions, surgery)


# Mean tissue / lesion intensities per modality, loosely mimicking MR contrast.
_BRAIN = {Modality.CT1: 0.6, Modality.T1W: 0.7, Modality.T2W: 0.5, Modality.FLAIR: 0.55}
_LESION = {Modality.CT1: 1.6, Modality.T1W: 0.35, Modality.T2W: 1.3, Modality.FLAIR: 1.4}


def brain_mask(shape: Sequence[int]) -> np.ndarray:
    grid = np.indices(shape, dtype=float)
    c = (np.array(shape, dtype=float) - 1) / 2
    r = np.array(shape, dtype=float) * 0.42
    return (((grid - c[:, None, None, None]) / r[:, None, None, None]) ** 2).sum(0) <= 1.0


def make_template(shape: Sequence[int] = (16, 16, 16), spacing=(1.0, 1.0, 1.0)) -> VolumeGrid:
    mask = brain_mask(shape)
    grid = np.indices(shape, dtype=float)
    # Mild anterior-posterior gradient keeps the template asymmetric for registration.
    vox = mask * (0.6 + 0.02 * grid[1] + 0.01 * grid[0])
    return VolumeGrid(vox.astype(np.float32), spacing=spacing, orientation="RAS", space_tag=SpaceTag.template)


def render_session(
    shape: Sequence[int],
    modality: Modality,
    center: np.ndarray,
    radius: float,
    rng: np.random.Generator,
    noise: float = 0.03,
) -> np.ndarray:
    mask = brain_mask(shape)
    grid = np.indices(shape, dtype=float)
    vox = mask * _BRAIN[modality]
    if radius > 0:
        d2 = ((grid - center[:, None, None, None]) ** 2).sum(0)
        lesion = np.clip(radius + 0.5 - np.sqrt(d2), 0.0, 1.0)
        vox = vox + mask * lesion * (_LESION[modality] - _BRAIN[modality])
    gain = 1.0 + 0.05 * (grid[2] / max(shape[2] - 1, 1) - 0.5)
    vox = vox * gain + mask * rng.normal(0.0, noise, size=tuple(shape))
    return np.clip(vox, 0.0, None).astype(np.float32)


def _next_label(radius: float, rng) -> RanoLabel:
    if radius <= 0:
        options, p = [RanoLabel.PD, RanoLabel.CR], [0.7, 0.3]
    elif radius > 4.0:
        options, p = [RanoLabel.SD, RanoLabel.PR, RanoLabel.CR], [0.4, 0.35, 0.25]
    else:
        options, p = [RanoLabel.PD, RanoLabel.SD, RanoLabel.PR, RanoLabel.CR], [0.4, 0.3, 0.15, 0.15]
    return options[int(rng.choice(len(options), p=p))]


def _evolve(radius: float, label: RanoLabel) -> float:
    if label is RanoLabel.PD:
        return max(radius * 1.6, 2.0)
    if label is RanoLabel.PR:
        return radius * 0.5
    if label is RanoLabel.CR:
        return 0.0
    return radius


def make_synthetic_cohort(
    root: str | Path,
    n_patients: int = 12,
    shape: Sequence[int] = (16, 16, 16),
    sessions_per_patient: tuple[int, int] = (4, 7),
    modality_dropout: float = 0.1,
    seed: int = 0,
    write_images: bool = True,
) -> SyntheticTruth:
    """Small labelled cohort with image content consistent with the labels."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    shape = tuple(int(s) for s in shape)
    sessions: list[SessionTruth] = []
    surgery: dict[str, int | None] = {}
    images: dict[tuple[str, int], dict[Modality, np.ndarray]] = {}

    for i in range(n_patients):
        pid = f"Patient-{i + 1:03d}"
        surgery[pid] = 0
        center = (np.array(shape) - 1) / 2 + rng.uniform(-0.15, 0.15, size=3) * np.array(shape)
        radius = float(rng.uniform(1.5, 3.0))
        plan = [(-1, RanoLabel.PreOp), (1, RanoLabel.PostOp)]
        week = int(rng.integers(6, 18))
        for _ in range(int(rng.integers(*sessions_per_patient))):
            label = _next_label(radius, rng) if rng.random() > 0.08 else RanoLabel.Unlabeled
            plan.append((week, label))
            week += int(rng.integers(6, 14))
        r = radius
        for wk, lab in plan:
            if lab.trainable:
                r = _evolve(r, lab)
            mods = canonical_modalities(m for m in MODALITY_ORDER if rng.random() >= modality_dropout)
            if lab in (RanoLabel.PreOp, RanoLabel.PostOp):
                mods = MODALITY_ORDER
            if not mods:
                mods = (Modality.FLAIR,)
            sessions.append(SessionTruth(pid, wk, lab, mods))
            if write_images:
                rad = 4.0 if lab is RanoLabel.PreOp else r
                images[(pid, wk)] = {m: render_session(shape, m, center, rad, rng) for m in mods}

    # One patient without a recorded surgery date.
    if n_patients > 3:
        surgery[f"Patient-{n_patients:03d}"] = None

    for s in sessions:
        d = _session_dir(root, s)
        for m in s.modalities:
            if write_images:
                save_volume(VolumeGrid(images[(s.patient_id, s.week)][m]), d / f"{m.value}.nii.gz")
            else:
                (d / f"{m.value}.nii.gz").touch()
    meta, clin = _write_tables(root, sessions, surgery, rng)
    template = None
    if write_images:
        template = save_volume(make_template(shape), root.parent / f"{root.name}_template.nii.gz")
    return SyntheticTruth(root, meta, clin, sessions, surgery, template)


def separable_toy(n: int = 40, shape=(8, 8, 8), channels: int = 2, seed: int = 0):
    """Two-class toy set: class 0 (PD) volumes are bright, class 1 (SD) dark."""
    rng = np.random.default_rng(seed)
    y = np.array([i % 2 for i in range(n)])
    x = rng.normal(0.0, 0.3, size=(n, channels, *shape)).astype(np.float32)
    x += np.where(y == 0, 1.0, -1.0)[:, None, None, None, None].astype(np.float32)
    return x, y


def blob_phantoms(n: int = 48, shape=(16, 16, 16), blob: int = 5, channels: int = 1, seed: int = 0):
    """Half the volumes (label 0) carry a bright ``blob``-cube at a random place.

    Returns volumes, labels and the boolean blob masks (all False for label 1).
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 0.2, size=(n, channels, *shape)).astype(np.float32)
    y = np.array([i % 2 for i in range(n)])
    masks = np.zeros((n, *shape), dtype=bool)
    for i in range(n):
        if y[i] == 0:
            lo = [int(rng.integers(1, s - blob - 1)) for s in shape]
            sl = tuple(slice(a, a + blob) for a in lo)
            masks[i][sl] = True
            x[i, :, sl[0], sl[1], sl[2]] += 2.0
    return x, y, masks
