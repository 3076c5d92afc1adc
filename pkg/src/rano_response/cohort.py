"""Longitudinal cohort indexing, timepoint filtering and consecutive pairing.

On-disk layout expected by :func:`index_dataset`::

    <root>/<patient>/week-<k>/<modality>.nii[.gz]

``<k>`` is an integer (weeks since first surgery, negative before it). Modality
file stems are matched case-insensitively against :data:`MODALITY_ALIASES`.

The metadata table is a delimiter-separated file with (at least) the columns in
:data:`METADATA_COLUMNS`; extra columns are ignored.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class RanoLabel(str, enum.Enum):
    PD = "PD"
    SD = "SD"
    PR = "PR"
    CR = "CR"
    PreOp = "PreOp"
    PostOp = "PostOp"
    Unlabeled = "Unlabeled"

    @property
    def trainable(self) -> bool:
        return self in TRAINABLE

    @property
    def index(self) -> int:
        """Class index (PD=0, SD=1, PR=2, CR=3)."""
        if not self.trainable:
            raise ValueError(f"{self.value} has no class index")
        return CLASS_ORDER.index(self)

    @classmethod
    def parse(cls, text: str | None) -> "RanoLabel":
        key = re.sub(r"[^a-z]", "", (text or "").lower())
        if key in _LABEL_ALIASES:
            return _LABEL_ALIASES[key]
        raise ValueError(f"unrecognised RANO label {text!r}")


CLASS_ORDER: tuple[RanoLabel, ...] = (RanoLabel.PD, RanoLabel.SD, RanoLabel.PR, RanoLabel.CR)
TRAINABLE = frozenset(CLASS_ORDER)
N_CLASSES = len(CLASS_ORDER)

_LABEL_ALIASES = {
    "pd": RanoLabel.PD,
    "progressivedisease": RanoLabel.PD,
    "sd": RanoLabel.SD,
    "stabledisease": RanoLabel.SD,
    "pr": RanoLabel.PR,
    "partialresponse": RanoLabel.PR,
    "cr": RanoLabel.CR,
    "completeresponse": RanoLabel.CR,
    "preop": RanoLabel.PreOp,
    "postop": RanoLabel.PostOp,
    "": RanoLabel.Unlabeled,
    "na": RanoLabel.Unlabeled,
    "nan": RanoLabel.Unlabeled,
    "none": RanoLabel.Unlabeled,
    "unlabeled": RanoLabel.Unlabeled,
    "unlabelled": RanoLabel.Unlabeled,
}


class Modality(str, enum.Enum):
    CT1 = "CT1"
    T1W = "T1W"
    T2W = "T2W"
    FLAIR = "FLAIR"

    @property
    def rank(self) -> int:
        return MODALITY_ORDER.index(self)

    @classmethod
    def parse(cls, text: str) -> "Modality":
        key = text.strip().lower()
        if key in MODALITY_ALIASES:
            return MODALITY_ALIASES[key]
        raise ValueError(f"unrecognised modality {text!r}")


MODALITY_ORDER: tuple[Modality, ...] = (Modality.CT1, Modality.T1W, Modality.T2W, Modality.FLAIR)

MODALITY_ALIASES = {
    "ct1": Modality.CT1,
    "t1c": Modality.CT1,
    "t1ce": Modality.CT1,
    "t1w": Modality.T1W,
    "t1": Modality.T1W,
    "t2w": Modality.T2W,
    "t2": Modality.T2W,
    "flair": Modality.FLAIR,
}

ModalitySet = tuple[Modality, ...]


def canonical_modalities(mods: Iterable[Modality | str]) -> ModalitySet:
    """Deduplicate and sort modalities into CT1 < T1W < T2W < FLAIR order."""
    parsed = {m if isinstance(m, Modality) else Modality.parse(m) for m in mods}
    return tuple(sorted(parsed, key=lambda m: m.rank))


def modality_key(mods: Iterable[Modality | str]) -> str:
    """Stable string id for a modality set, e.g. ``"T1W+T2W+FLAIR"``."""
    return "+".join(m.value for m in canonical_modalities(mods))


def parse_modality_key(key: str) -> ModalitySet:
    return canonical_modalities(part for part in key.split("+") if part)


# The five input combinations compared in the study.
STUDY_MODALITY_SETS: tuple[ModalitySet, ...] = (
    canonical_modalities(["CT1", "T1W", "T2W", "FLAIR"]),
    canonical_modalities(["T1W", "T2W", "FLAIR"]),
    canonical_modalities(["CT1"]),
    canonical_modalities(["CT1", "FLAIR"]),
    canonical_modalities(["T1W", "FLAIR"]),
)


@dataclass(frozen=True)
class TimepointRecord:
    patient_id: str
    week: int
    label: RanoLabel
    available: ModalitySet
    image_paths: Mapping[Modality, str] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "available", canonical_modalities(self.available))
        if set(self.image_paths) != set(self.available):
            raise ValueError(
                f"{self.patient_id} week {self.week}: image_paths keys do not match available modalities"
            )

    def has(self, modalities: Iterable[Modality]) -> bool:
        return set(modalities) <= set(self.available)

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "week": self.week,
            "label": self.label.value,
            "available": [m.value for m in self.available],
            "image_paths": {m.value: p for m, p in self.image_paths.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TimepointRecord":
        return cls(
            patient_id=str(d["patient_id"]),
            week=int(d["week"]),
            label=RanoLabel(d["label"]),
            available=canonical_modalities(d["available"]),
            image_paths={Modality(k): v for k, v in d["image_paths"].items()},
        )


@dataclass(frozen=True)
class StudySample:
    patient_id: str
    prev: TimepointRecord
    curr: TimepointRecord
    modalities: ModalitySet

    def __post_init__(self):
        object.__setattr__(self, "modalities", canonical_modalities(self.modalities))
        if not (self.prev.patient_id == self.curr.patient_id == self.patient_id):
            raise ValueError("sample timepoints belong to different patients")
        if self.prev.week >= self.curr.week:
            raise ValueError(f"{self.patient_id}: prev week {self.prev.week} >= curr week {self.curr.week}")
        if not (self.prev.has(self.modalities) and self.curr.has(self.modalities)):
            raise ValueError(f"{self.id}: modality set not available at both timepoints")
        if not self.curr.label.trainable:
            raise ValueError(f"{self.id}: label {self.curr.label.value} is not a RANO response class")

    @property
    def label(self) -> RanoLabel:
        return self.curr.label

    @property
    def id(self) -> str:
        return f"{self.patient_id}:{self.prev.week}-{self.curr.week}"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "patient_id": self.patient_id,
            "label": self.label.value,
            "modalities": [m.value for m in self.modalities],
            "prev": self.prev.to_dict(),
            "curr": self.curr.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StudySample":
        return cls(
            patient_id=str(d["patient_id"]),
            prev=TimepointRecord.from_dict(d["prev"]),
            curr=TimepointRecord.from_dict(d["curr"]),
            modalities=canonical_modalities(d["modalities"]),
        )


class DuplicateTimepointError(ValueError):
    pass


class MetadataSchemaError(ValueError):
    pass


class EmptyCohortError(ValueError):
    pass


METADATA_COLUMNS = {
    "patient": "patient",
    "week": "week",
    "label": "rating",
    "surgery_week": "surgery_week",
}


@dataclass
class DatasetIndex:
    """Result of :func:`index_dataset`.

    ``errors`` holds one human-readable entry per metadata row that could not
    be used; those rows never abort indexing.
    """

    records: list[TimepointRecord]
    surgery_weeks: dict[str, int | None]
    errors: list[str] = field(default_factory=list)

    def by_patient(self) -> dict[str, list[TimepointRecord]]:
        grouped: dict[str, list[TimepointRecord]] = defaultdict(list)
        for r in self.records:
            grouped[r.patient_id].append(r)
        return dict(grouped)

    def __len__(self) -> int:
        return len(self.records)


_WEEK_DIR = re.compile(r"^week-(-?\d+)$", re.IGNORECASE)
_NIFTI = re.compile(r"^(.+?)\.nii(\.gz)?$", re.IGNORECASE)


def _read_table(path: Path) -> tuple[list[str], list[dict[str, str]]]:
    text = path.read_text()
    try:
        dialect = csv.Sniffer().sniff(text.splitlines()[0] if text else ",", delimiters=",;\t")
    except csv.Error:
        dialect = csv.excel
    reader = csv.DictReader(text.splitlines(), dialect=dialect)
    rows = [dict(r) for r in reader]
    return list(reader.fieldnames or []), rows


def _scan_sessions(root: Path) -> dict[tuple[str, int], dict[Modality, str]]:
    sessions: dict[tuple[str, int], dict[Modality, str]] = {}
    for patient_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for session_dir in sorted(p for p in patient_dir.iterdir() if p.is_dir()):
            m = _WEEK_DIR.match(session_dir.name)
            if not m:
                continue
            key = (patient_dir.name, int(m.group(1)))
            if key in sessions:
                raise DuplicateTimepointError(f"duplicate session on disk: {key[0]} week {key[1]}")
            images: dict[Modality, str] = {}
            for f in sorted(session_dir.iterdir()):
                nm = _NIFTI.match(f.name)
                if not nm:
                    continue
                try:
                    mod = Modality.parse(nm.group(1))
                except ValueError:
                    continue
                images.setdefault(mod, str(f))
            sessions[key] = images
    return sessions


def index_dataset(
    root: str | Path,
    metadata: str | Path | None,
    columns: Mapping[str, str] | None = None,
) -> DatasetIndex:
    """Index every imaging session under ``root`` and attach metadata labels.

    Sessions without a metadata row are kept as ``Unlabeled``. Metadata rows
    that cannot be parsed, or that point at no session on disk, are reported in
    ``DatasetIndex.errors``. A repeated (patient, week) key raises
    :class:`DuplicateTimepointError`.
    """
    root = Path(root)
    cols = {**METADATA_COLUMNS, **(columns or {})}
    if not root.exists():
        raise FileNotFoundError(root)

    sessions = _scan_sessions(root)
    labels: dict[tuple[str, int], RanoLabel] = {}
    surgery: dict[str, int | None] = {}
    errors: list[str] = []

    if metadata is not None:
        header, rows = _read_table(Path(metadata))
        missing = [c for c in cols.values() if c not in header]
        if missing:
            raise MetadataSchemaError(f"metadata table lacks required columns: {missing}")
        for lineno, row in enumerate(rows, start=2):
            pid = (row.get(cols["patient"]) or "").strip()
            try:
                if not pid:
                    raise ValueError("empty patient id")
                week = int(str(row[cols["week"]]).strip())
                label = RanoLabel.parse(row.get(cols["label"]))
                sw_raw = (row.get(cols["surgery_week"]) or "").strip()
                sw = int(float(sw_raw)) if sw_raw and sw_raw.lower() not in ("na", "nan") else None
            except (ValueError, TypeError) as exc:
                errors.append(f"line {lineno}: {exc}")
                continue
            key = (pid, week)
            if key in labels:
                raise DuplicateTimepointError(f"duplicate metadata row for {pid} week {week} (line {lineno})")
            if key not in sessions:
                errors.append(f"line {lineno}: no imaging session on disk for {pid} week {week}")
                continue
            labels[key] = label
            if sw is not None:
                if surgery.get(pid) not in (None, sw):
                    errors.append(f"line {lineno}: conflicting surgery week for {pid}, keeping {surgery[pid]}")
                else:
                    surgery[pid] = sw
            else:
                surgery.setdefault(pid, None)

    records = [
        TimepointRecord(
            patient_id=pid,
            week=week,
            label=labels.get((pid, week), RanoLabel.Unlabeled),
            available=tuple(images),
            image_paths=images,
        )
        for (pid, week), images in sorted(sessions.items())
    ]
    for pid in {r.patient_id for r in records}:
        surgery.setdefault(pid, None)
    return DatasetIndex(records=records, surgery_weeks=surgery, errors=errors)


def filter_timepoints(
    records: Sequence[TimepointRecord],
    surgery_week: Mapping[str, int | None],
    min_gap_weeks: int = 13,
) -> list[TimepointRecord]:
    """Keep labelled response timepoints at least ``min_gap_weeks`` after surgery.

    Drops PreOp/PostOp/Unlabeled records, records closer than the minimum gap to
    the patient's surgery week, and records without any modality. Patients with
    no surgery week are dropped entirely.
    """
    kept = []
    dropped_patients = set()
    for r in records:
        sw = surgery_week.get(r.patient_id)
        if sw is None:
            dropped_patients.add(r.patient_id)
            continue
        if not r.label.trainable:
            continue
        if r.week - sw < min_gap_weeks:
            continue
        if not r.available:
            continue
        kept.append(r)
    for pid in sorted(dropped_patients):
        logger.warning("patient %s has no surgery week; all of its timepoints were excluded", pid)
    return kept


def pair_consecutive(filtered: Sequence[TimepointRecord], modalities: Iterable[Modality | str]) -> list[StudySample]:
    """Pair adjacent filtered timepoints that both carry ``modalities``.

    Adjacency is taken over the filtered timepoints of each patient, so an
    intermediate session lacking the modality set breaks the chain rather than
    being skipped.
    """
    mods = canonical_modalities(modalities)
    grouped: dict[str, list[TimepointRecord]] = defaultdict(list)
    for r in filtered:
        grouped[r.patient_id].append(r)
    samples = []
    for pid in sorted(grouped):
        tps = sorted(grouped[pid], key=lambda r: r.week)
        for prev, curr in zip(tps, tps[1:]):
            if prev.has(mods) and curr.has(mods):
                samples.append(StudySample(pid, prev, curr, mods))
    return samples


@dataclass(frozen=True)
class CohortSummary:
    counts: dict[RanoLabel, int]
    total: int

    @property
    def prevalence(self) -> dict[RanoLabel, float]:
        return {c: n / self.total for c, n in self.counts.items()}

    def prevalence_vector(self) -> np.ndarray:
        return np.array([self.prevalence[c] for c in CLASS_ORDER])

    def count_vector(self) -> np.ndarray:
        return np.array([self.counts[c] for c in CLASS_ORDER])

    def rows(self) -> list[dict]:
        return [
            {"class": c.value, "count": self.counts[c], "prevalence": self.prevalence[c]}
            for c in CLASS_ORDER
        ]


def cohort_summary(items: Sequence) -> CohortSummary:
    """Per-class counts and prevalences of samples (or labelled records)."""
    if len(items) == 0:
        raise EmptyCohortError("cannot summarise an empty cohort")
    tally = Counter(it.label for it in items if it.label.trainable)
    counts = {c: tally.get(c, 0) for c in CLASS_ORDER}
    total = sum(counts.values())
    if total == 0:
        raise EmptyCohortError("cohort contains no RANO response labels")
    return CohortSummary(counts=counts, total=total)


def write_manifest(samples: Iterable[StudySample], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict()) + "\n")
    return path


def read_manifest(path: str | Path) -> list[StudySample]:
    with Path(path).open() as fh:
        return [StudySample.from_dict(json.loads(line)) for line in fh if line.strip()]


def build_cohort(index: DatasetIndex, modalities: Iterable[Modality | str], min_gap_weeks: int = 13) -> list[StudySample]:
    filtered = filter_timepoints(index.records, index.surgery_weeks, min_gap_weeks)
    return pair_consecutive(filtered, modalities)
