"""Cross-validation folds, imbalance-aware sampling and augmentation."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cohort import CLASS_ORDER, N_CLASSES, RanoLabel, StudySample

logger = logging.getLogger(__name__)


def _class_index(label) -> int:
    if isinstance(label, RanoLabel):
        return label.index
    return int(label)


@dataclass
class FoldPlan:
    n_folds: int
    assignments: dict[str, int]
    per_fold_class_counts: np.ndarray
    seed: int
    warnings: list[str] = field(default_factory=list)
    group_by_patient: bool = False

    def test_ids(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignments.items() if f != fold]

    def split(self, samples: Sequence[StudySample], fold: int):
        train = [s for s in samples if self.assignments[s.id] != fold]
        test = [s for s in samples if self.assignments[s.id] == fold]
        return train, test

    def to_dict(self) -> dict:
        return {
            "n_folds": self.n_folds,
            "seed": self.seed,
            "group_by_patient": self.group_by_patient,
            "assignments": self.assignments,
            "per_fold_class_counts": self.per_fold_class_counts.tolist(),
            "class_order": [c.value for c in CLASS_ORDER],
            "warnings": self.warnings,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        d = json.loads(Path(path).read_text())
        return cls(
            n_folds=d["n_folds"],
            assignments={k: int(v) for k, v in d["assignments"].items()},
            per_fold_class_counts=np.array(d["per_fold_class_counts"], dtype=int),
            seed=d["seed"],
            warnings=list(d.get("warnings", [])),
            group_by_patient=d.get("group_by_patient", False),
        )


def make_folds(
    samples: Sequence[StudySample],
    n_folds: int = 5,
    seed: int = 0,
    group_by_patient: bool = False,
) -> FoldPlan:
    """Stratified assignment of samples to ``n_folds`` folds.

    Samples of each class are shuffled and dealt round-robin, continuing the
    deal position across classes so fold sizes stay balanced too. With
    ``group_by_patient`` all samples of a patient share a fold (stratification
    is then best effort).
    """
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids are not unique")
    labels = np.array([s.label.index for s in samples], dtype=int)
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    warns: list[str] = []

    for c in range(N_CLASSES):
        n_c = int((labels == c).sum())
        if 0 < n_c < n_folds:
            msg = f"class {CLASS_ORDER[c].value} has {n_c} samples for {n_folds} folds; some folds lack it"
            warns.append(msg)
            logger.warning(msg)

    if group_by_patient:
        patients = sorted({s.patient_id for s in samples})
        counts = np.zeros((len(patients), N_CLASSES), dtype=int)
        pindex = {p: i for i, p in enumerate(patients)}
        for s, y in zip(samples, labels):
            counts[pindex[s.patient_id], y] += 1
        order = rng.permutation(len(patients))
        # rarest-class-first greedy placement into the emptiest fold for that class
        rarity = counts / np.maximum(counts.sum(0), 1)
        order = sorted(order, key=lambda i: -rarity[i].max())
        fold_counts = np.zeros((n_folds, N_CLASSES))
        patient_fold = {}
        for i in order:
            cost = ((fold_counts + counts[i]) ** 2).sum(1) + 1e-9 * np.arange(n_folds)
            f = int(np.argmin(cost))
            fold_counts[f] += counts[i]
            patient_fold[patients[i]] = f
        for s in samples:
            assignments[s.id] = patient_fold[s.patient_id]
    else:
        deal = 0
        for c in range(N_CLASSES):
            members = [i for i in range(len(samples)) if labels[i] == c]
            rng.shuffle(members)
            for i in members:
                assignments[ids[i]] = deal % n_folds
                deal += 1

    per_fold = np.zeros((n_folds, N_CLASSES), dtype=int)
    for sid, y in zip(ids, labels):
        per_fold[assignments[sid], y] += 1
    ordered = {sid: assignments[sid] for sid in ids}
    return FoldPlan(n_folds, ordered, per_fold, seed, warns, group_by_patient)


@dataclass(frozen=True)
class SampleWeighting:
    weights: dict[str, float]
    prevalence: dict[int, float]


class DegenerateSamplerError(ValueError):
    pass


def prevalence_from_labels(labels: Sequence) -> np.ndarray:
    idx = np.array([_class_index(y) for y in labels], dtype=int)
    counts = np.bincount(idx, minlength=N_CLASSES).astype(float)
    return counts / counts.sum()


def compute_sample_weights(
    ids: Sequence[str], labels: Sequence, prevalence: Sequence[float] | Mapping | None = None
) -> SampleWeighting:
    """Sampler weights W(s) = 1 - P(class of s).

    ``prevalence`` defaults to the class frequencies among ``labels``.
    """
    if prevalence is None:
        prev = prevalence_from_labels(labels)
    elif isinstance(prevalence, Mapping):
        prev = np.array([prevalence[c] if c in prevalence else prevalence.get(CLASS_ORDER[c], 0.0) for c in range(N_CLASSES)])
    else:
        prev = np.asarray(prevalence, dtype=float)
    if not np.isclose(prev.sum(), 1.0, atol=1e-9):
        raise ValueError(f"prevalences must sum to 1, got {prev.sum()}")
    weights = {sid: 1.0 - float(prev[_class_index(y)]) for sid, y in zip(ids, labels)}
    if not weights or all(w <= 0 for w in weights.values()):
        raise DegenerateSamplerError("all sampler weights are zero (single-class cohort)")
    return SampleWeighting(weights, {c: float(prev[c]) for c in range(N_CLASSES)})


def weighted_draw(weights: SampleWeighting | Mapping[str, float], n: int, seed) -> list[str]:
    """Draw ``n`` ids with replacement, proportionally to their weight."""
    w = weights.weights if isinstance(weights, SampleWeighting) else weights
    if n < 1:
        raise ValueError("n must be positive")
    ids = list(w)
    p = np.array([w[i] for i in ids], dtype=float)
    if p.sum() <= 0:
        raise DegenerateSamplerError("no positive sampler weight")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picks = rng.choice(len(ids), size=n, replace=True, p=p / p.sum())
    return [ids[i] for i in picks]


def compute_class_loss_weights(
    prevalence: Sequence[float], counts: Sequence[int] | None = None
) -> np.ndarray:
    """Per-class loss weights 1/P(c).

    A class absent from the training fold gets its prevalence from add-one
    smoothed ``counts`` instead (all classes are smoothed together).
    """
    prev = np.asarray(prevalence, dtype=float)
    if np.any(prev <= 0):
        if counts is None:
            raise ValueError("zero prevalence needs class counts for smoothing")
        c = np.asarray(counts, dtype=float) + 1.0
        prev = c / c.sum()
        logger.info("class with zero training prevalence; add-one smoothed prevalences %s", np.round(prev, 4))
    return 1.0 / prev


def class_loss_weights_from_labels(labels: Sequence) -> np.ndarray:
    idx = np.array([_class_index(y) for y in labels], dtype=int)
    counts = np.bincount(idx, minlength=N_CLASSES)
    return compute_class_loss_weights(counts / counts.sum(), counts)


@dataclass(frozen=True)
class AugmentationPolicy:
    flip_prob_per_axis: float = 0.5
    intensity_scale_prob: float = 0.9
    intensity_scale_factor: float = 0.1
    contrast_prob: float = 0.9
    gamma_range: tuple[float, float] = (0.7, 1.5)
    noise_prob: float = 0.9
    noise_mean: float = 0.0
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob_per_axis", "intensity_scale_prob", "contrast_prob", "noise_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.gamma_range
        if not (0 < lo < hi):
            raise ValueError(f"invalid gamma range {self.gamma_range}")
        if self.noise_std < 0 or self.intensity_scale_factor < 0:
            raise ValueError("noise_std and intensity_scale_factor must be nonnegative")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls(0.0, 0.0, 0.1, 0.0, (0.7, 1.5), 0.0, 0.0, 0.1, seed)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    """Independent stream per (seed, sample, epoch)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(sample_id.encode()), int(epoch)])


def augment(channels: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random flips, intensity scaling, gamma contrast and additive noise.

    ``channels`` has shape (C, D, H, W). Spatial flips are shared by all
    channels. Random draws are made in a fixed order regardless of which
    transforms fire, so equal generators give equal results.
    """
    x = np.asarray(channels, dtype=np.float32)
    flips = rng.random(3) < policy.flip_prob_per_axis
    do_scale = rng.random() < policy.intensity_scale_prob
    scale = rng.uniform(-policy.intensity_scale_factor, policy.intensity_scale_factor)
    do_gamma = rng.random() < policy.contrast_prob
    gamma = rng.uniform(*policy.gamma_range)
    do_noise = rng.random() < policy.noise_prob

    for axis, flip in enumerate(flips):
        if flip:
            x = np.flip(x, axis=axis + 1)
    x = np.ascontiguousarray(x)
    if do_scale:
        x = x * np.float32(1.0 + scale)
    if do_gamma:
        lo, hi = float(x.min()), float(x.max())
        rng_span = hi - lo
        if rng_span > 0:
            x = (((x - lo) / (rng_span + 1e-7)) ** gamma * rng_span + lo).astype(np.float32)
    if do_noise:
        x = x + rng.normal(policy.noise_mean, policy.noise_std, size=x.shape).astype(np.float32)
    return x
