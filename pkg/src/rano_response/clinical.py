"""Per-patient clinical covariates and their fixed-length numeric encoding.

Encoded layout (length 10, or 11 with survival)::

    0      age at surgery, z-scored with training-fold statistics
    1-2    sex one-hot            (M, F)
    3-6    IDH one-hot            (wildtype, IDH1_negative, mutant, missing)
    7-9    MGMT one-hot           (methylated, unmethylated, missing)
    10     survival weeks, z-scored (only when include_survival=True)

Survival time describes the outcome, so it is excluded unless explicitly asked for.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

SEX_LEVELS = ("M", "F")
IDH_LEVELS = ("wildtype", "IDH1_negative", "mutant", "missing")
MGMT_LEVELS = ("methylated", "unmethylated", "missing")
FEATURE_NAMES = (
    "age_z",
    *(f"sex_{s}" for s in SEX_LEVELS),
    *(f"idh_{s}" for s in IDH_LEVELS),
    *(f"mgmt_{s}" for s in MGMT_LEVELS),
)
CLINICAL_DIM = len(FEATURE_NAMES)

CLINICAL_COLUMNS = {
    "patient": "patient",
    "age": "age_at_surgery",
    "sex": "sex",
    "idh": "idh",
    "mgmt": "mgmt",
    "survival": "survival_weeks",
}


def _norm(text: str | None) -> str:
    return re.sub(r"[^a-z0-9]", "", (text or "").lower())


def _parse_idh(text: str | None) -> str:
    key = _norm(text)
    if key in ("wildtype", "wt", "idhwildtype"):
        return "wildtype"
    if key in ("idh1negative", "negative"):
        return "IDH1_negative"
    if key in ("mutant", "mutated", "idhmutant"):
        return "mutant"
    return "missing"


def _parse_mgmt(text: str | None) -> str:
    key = _norm(text)
    if key == "methylated":
        return "methylated"
    if key in ("unmethylated", "notmethylated"):
        return "unmethylated"
    return "missing"


@dataclass(frozen=True)
class ClinicalVector:
    age_at_surgery: float
    sex: str
    idh: str = "missing"
    mgmt: str = "missing"
    survival_weeks: float | None = None

    def __post_init__(self):
        if self.sex not in SEX_LEVELS:
            raise ValueError(f"sex must be one of {SEX_LEVELS}, got {self.sex!r}")
        if self.idh not in IDH_LEVELS:
            raise ValueError(f"unknown IDH level {self.idh!r}")
        if self.mgmt not in MGMT_LEVELS:
            raise ValueError(f"unknown MGMT level {self.mgmt!r}")


@dataclass(frozen=True)
class ClinicalEncoder:
    """Encodes ClinicalVectors; continuous features use fitted mean/std."""

    age_mean: float = 0.0
    age_std: float = 1.0
    include_survival: bool = False
    survival_mean: float = 0.0
    survival_std: float = 1.0

    @property
    def dim(self) -> int:
        return CLINICAL_DIM + int(self.include_survival)

    @classmethod
    def fit(cls, vectors: Iterable[ClinicalVector], include_survival: bool = False) -> "ClinicalEncoder":
        vectors = list(vectors)
        ages = np.array([v.age_at_surgery for v in vectors], dtype=float)
        age_mean = float(ages.mean()) if ages.size else 0.0
        age_std = float(ages.std()) if ages.size and ages.std() > 0 else 1.0
        surv_mean, surv_std = 0.0, 1.0
        if include_survival:
            surv = np.array([v.survival_weeks for v in vectors if v.survival_weeks is not None], dtype=float)
            if surv.size:
                surv_mean = float(surv.mean())
                surv_std = float(surv.std()) or 1.0
        return cls(age_mean, age_std, include_survival, surv_mean, surv_std)

    def encode(self, v: ClinicalVector) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.float32)
        out[0] = (v.age_at_surgery - self.age_mean) / self.age_std
        out[1 + SEX_LEVELS.index(v.sex)] = 1.0
        out[3 + IDH_LEVELS.index(v.idh)] = 1.0
        out[7 + MGMT_LEVELS.index(v.mgmt)] = 1.0
        if self.include_survival:
            if v.survival_weeks is not None:
                out[10] = (v.survival_weeks - self.survival_mean) / self.survival_std
        return out

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def load_clinical_table(path: str | Path, columns: Mapping[str, str] | None = None) -> dict[str, ClinicalVector]:
    cols = {**CLINICAL_COLUMNS, **(columns or {})}
    out: dict[str, ClinicalVector] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            pid = row[cols["patient"]].strip()
            surv = (row.get(cols["survival"]) or "").strip()
            out[pid] = ClinicalVector(
                age_at_surgery=float(row[cols["age"]]),
                sex=row[cols["sex"]].strip().upper()[:1],
                idh=_parse_idh(row.get(cols["idh"])),
                mgmt=_parse_mgmt(row.get(cols["mgmt"])),
                survival_weeks=float(surv) if surv and surv.lower() not in ("na", "nan") else None,
            )
    return out
