"""Greedy ablation study: configuration, persistence and orchestration.

Axes are evaluated in a fixed order. Each axis trains every option on every
fold with all earlier winners frozen, compares the options with rank tests and
freezes the winner for the axes that follow. All randomness derives from the
study seed through :func:`derive_seed` (study -> axis -> option -> fold), and
the epoch level is handled inside training.
"""

from __future__ import annotations

import copy
import dataclasses
import enum
import functools
import hashlib
import json
import logging
import os
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

from .clinical import ClinicalEncoder, load_clinical_table
from .cohort import (
    CLASS_ORDER,
    STUDY_MODALITY_SETS,
    DatasetIndex,
    StudySample,
    canonical_modalities,
    cohort_summary,
    filter_timepoints,
    index_dataset,
    modality_key,
    pair_consecutive,
    parse_modality_key,
    write_manifest,
)
from .evaluation import (
    METRIC_NAMES,
    MetricsReport,
    StatResult,
    compute_metrics,
    dunn_posthoc,
    kruskal_wallis,
    mann_whitney_u,
)
from .models import ArchitectureId, InputSpec, build_model, load_checkpoint, save_checkpoint
from .preprocess import PreprocessConfig, preprocess_paths
from .sampling import AugmentationPolicy, FoldPlan, make_folds
from .train import CohortDataset, PretrainKind, PretrainTask, TrainConfig, predict, pretrain, train_fold
from .volume import load_volume

logger = logging.getLogger(__name__)


class ApproachAxisName(str, enum.Enum):
    Subtraction = "Subtraction"
    Modalities = "Modalities"
    Architecture = "Architecture"
    Pretraining = "Pretraining"
    ClinicalData = "ClinicalData"


AXIS_ORDER = tuple(ApproachAxisName)

DEFAULT_OPTIONS: dict[str, list] = {
    "Subtraction": [False, True],
    "Modalities": [modality_key(m) for m in STUDY_MODALITY_SETS],
    "Architecture": [a.value for a in ArchitectureId],
    "Pretraining": [k.value for k in PretrainKind],
    "ClinicalData": [False, True],
}


def option_id(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass(frozen=True)
class ApproachAxis:
    name: ApproachAxisName
    options: tuple

    def __post_init__(self):
        object.__setattr__(self, "name", ApproachAxisName(self.name))
        if not self.options:
            raise ValueError(f"axis {self.name.value} has no options")
        ids = [option_id(o) for o in self.options]
        if len(set(ids)) != len(ids):
            raise ValueError(f"axis {self.name.value} lists an option twice")

    @property
    def order(self) -> int:
        return AXIS_ORDER.index(self.name)


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from a path of identifiers."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


# ------------------------------------------------------------------- config


@dataclass
class DataSection:
    root: str = ""
    metadata: str | None = None
    clinical: str | None = None
    template: str | None = None
    cache_dir: str | None = None
    min_gap_weeks: int = 13
    include_survival: bool = False


@dataclass
class FoldSection:
    n_folds: int = 5
    group_by_patient: bool = False


@dataclass
class PretrainSection:
    epochs: int = 5
    lr: float = 1e-4
    organ_source: str | None = None
    checkpoint_source: str | None = None
    max_volumes: int = 64


@dataclass
class ExplainSection:
    n_samples: int = 4
    target: str = "predicted"  # or "ground_truth"
    layer: str | None = None
    n_slices: int = 3


@dataclass
class StudyConfig:
    name: str = "study"
    seed: int = 0
    output_dir: str = "runs/study"
    workers: int = 1
    data: DataSection = field(default_factory=DataSection)
    folds: FoldSection = field(default_factory=FoldSection)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationPolicy | None = field(default_factory=AugmentationPolicy)
    pretraining: PretrainSection = field(default_factory=PretrainSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    axes: dict[str, list] = field(default_factory=lambda: copy.deepcopy(DEFAULT_OPTIONS))
    model_kwargs: dict[str, dict] = field(default_factory=dict)

    def axis_list(self) -> list[ApproachAxis]:
        unknown = set(self.axes) - {a.value for a in AXIS_ORDER}
        if unknown:
            raise ValueError(f"unknown axes {sorted(unknown)}")
        return [ApproachAxis(a, tuple(self.axes.get(a.value, DEFAULT_OPTIONS[a.value]))) for a in AXIS_ORDER]

    def initial_choices(self) -> dict[str, Any]:
        """Before an axis is decided its first listed option is in force."""
        return {ax.name.value: ax.options[0] for ax in self.axis_list()}

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.augmentation is None:
            d["augmentation"] = {"enabled": False}
        else:
            d["augmentation"] = {"enabled": True, **asdict(self.augmentation)}
            d["augmentation"]["gamma_range"] = list(self.augmentation.gamma_range)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: Mapping, base_dir: str | Path | None = None) -> "StudyConfig":
        raw = dict(raw or {})
        study = dict(raw.pop("study", {}))
        top = {k: raw.pop(k) for k in ("name", "seed", "output_dir", "workers") if k in raw}
        study.update(top)

        def build(klass, section):
            section = dict(section or {})
            names = {f.name for f in dataclasses.fields(klass)}
            unknown = set(section) - names
            if unknown:
                raise ValueError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
            return klass(**section)

        aug_raw = dict(raw.pop("augmentation", {}) or {})
        enabled = aug_raw.pop("enabled", True)
        if "gamma_range" in aug_raw:
            aug_raw["gamma_range"] = tuple(aug_raw["gamma_range"])
        cfg = cls(
            **{k: study[k] for k in ("name", "seed", "output_dir", "workers") if k in study},
            data=build(DataSection, raw.pop("data", {})),
            folds=build(FoldSection, raw.pop("folds", {})),
            preprocess=build(PreprocessConfig, raw.pop("preprocess", {})),
            train=build(TrainConfig, raw.pop("train", {})),
            augmentation=build(AugmentationPolicy, aug_raw) if enabled else None,
            pretraining=build(PretrainSection, raw.pop("pretraining", {})),
            explain=build(ExplainSection, raw.pop("explain", {})),
            axes={**copy.deepcopy(DEFAULT_OPTIONS), **(raw.pop("axes", {}) or {})},
            model_kwargs=dict(raw.pop("model_kwargs", {}) or {}),
        )
        if raw:
            raise ValueError(f"unknown config sections: {sorted(raw)}")
        if base_dir is not None:
            cfg._resolve_paths(Path(base_dir))
        cfg.axis_list()
        return cfg

    def _resolve_paths(self, base: Path) -> None:
        def fix(p):
            if p is None or p == "":
                return p
            q = Path(p).expanduser()
            return str(q if q.is_absolute() else (base / q).resolve())

        self.output_dir = fix(self.output_dir)
        for name in ("root", "metadata", "clinical", "template", "cache_dir"):
            setattr(self.data, name, fix(getattr(self.data, name)))
        self.pretraining.organ_source = fix(self.pretraining.organ_source)
        self.pretraining.checkpoint_source = fix(self.pretraining.checkpoint_source)


def load_config(path: str | Path) -> StudyConfig:
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    return StudyConfig.from_dict(raw, base_dir=path.parent)


def write_config_snapshot(cfg: StudyConfig, directory: str | Path, command: str) -> Path:
    """Resolved configuration next to the outputs of a run."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / f"resolved_config.{command}.yaml"
    payload = {"command": command, "config_hash": cfg.hash(), **cfg.to_dict()}
    out.write_text(yaml.safe_dump(payload, sort_keys=False))
    return out


# ------------------------------------------------------------------ records


@dataclass
class ExperimentRecord:
    axis: str
    option: str
    fold: int
    metrics: MetricsReport | None
    config_hash: str
    checkpoint: str | None
    wall_time: float
    status: str = "complete"  # or "failed"
    error: str = ""
    choices: dict = field(default_factory=dict)
    best_epoch: int | None = None
    n_train: int = 0
    n_test: int = 0

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.axis, self.option, self.fold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = None if self.metrics is None else self.metrics.to_dict()
        d["choices"] = {k: option_id(v) for k, v in self.choices.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentRecord":
        d = dict(d)
        d["metrics"] = None if d.get("metrics") is None else MetricsReport.from_dict(d["metrics"])
        return cls(**d)


class RecordStore:
    """Append-only JSONL of ExperimentRecords, one fsync per record.

    A final line cut short by a crash is dropped (and truncated away) on open.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._records: dict[tuple, ExperimentRecord] = {}
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        good = 0
        pos = 0
        for line in data.split(b"\n"):
            end = pos + len(line) + 1
            if line.strip():
                try:
                    rec = ExperimentRecord.from_dict(json.loads(line))
                except (json.JSONDecodeError, TypeError, KeyError):
                    logger.warning("dropping unreadable record at byte %d of %s", pos, self.path)
                    break
                if end > len(data):  # no trailing newline: record was not finished
                    logger.warning("dropping unterminated final record in %s", self.path)
                    break
                if rec.key in self._records:
                    raise ValueError(f"duplicate record {rec.key} in {self.path}")
                self._records[rec.key] = rec
            good = min(end, len(data))
            pos = end
        if good < len(data):
            with self.path.open("r+b") as fh:
                fh.truncate(good)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._records

    def __len__(self) -> int:
        return len(self._records)

    def get(self, key) -> ExperimentRecord | None:
        return self._records.get(tuple(key))

    def records(self, axis: str | None = None) -> list[ExperimentRecord]:
        recs = list(self._records.values())
        return [r for r in recs if axis is None or r.axis == axis]

    def append(self, rec: ExperimentRecord) -> None:
        if rec.key in self._records:
            raise ValueError(f"record {rec.key} already exists")
        line = json.dumps(rec.to_dict(), sort_keys=True) + "\n"
        with self.path.open("a") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())
        self._records[rec.key] = rec


@dataclass
class AxisStat:
    axis: str
    metric: str
    result: StatResult

    def to_dict(self) -> dict:
        return {"axis": self.axis, "metric": self.metric, **self.result.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AxisStat":
        d = dict(d)
        return cls(d.pop("axis"), d.pop("metric"), StatResult.from_dict(d))


# -------------------------------------------------------- axis-level logic


def option_reports(records: Sequence[ExperimentRecord], n_folds: int) -> tuple[dict[str, MetricsReport], dict[str, str]]:
    """Aggregated metrics for complete options and a note for incomplete ones."""
    by_option: dict[str, list[ExperimentRecord]] = {}
    for r in records:
        by_option.setdefault(r.option, []).append(r)
    complete, notes = {}, {}
    for opt, recs in by_option.items():
        failed = [r for r in recs if r.status != "complete"]
        if failed:
            notes[opt] = f"incomplete: fold {failed[0].fold} failed ({failed[0].error.splitlines()[0] if failed[0].error else 'no detail'})"
        elif len(recs) < n_folds:
            notes[opt] = f"incomplete: {len(recs)}/{n_folds} folds"
        else:
            complete[opt] = MetricsReport.aggregate([r.metrics for r in sorted(recs, key=lambda r: r.fold)])
    return complete, notes


def select_winner(reports: Mapping[str, MetricsReport], channel_counts: Mapping[str, int]) -> str | None:
    """Highest median balanced accuracy, then median F1, then fewer channels."""
    if not reports:
        return None
    return min(
        reports,
        key=lambda o: (-reports[o].balanced_accuracy, -reports[o].f1, channel_counts.get(o, 0), list(reports).index(o)),
    )


def axis_statistics(axis: str, reports: Mapping[str, MetricsReport]) -> list[AxisStat]:
    """Mann-Whitney for two options, Kruskal-Wallis (+ Dunn) for more.

    Dunn post-hoc pairs are computed for every metric once any Kruskal-Wallis
    test on this axis is significant.
    """
    names = list(reports)
    if len(names) < 2:
        return []
    out: list[AxisStat] = []
    values = {m: [[getattr(f, m) for f in reports[o].per_fold] for o in names] for m in METRIC_NAMES}
    if len(names) == 2:
        for m in METRIC_NAMES:
            out.append(AxisStat(axis, m, mann_whitney_u(values[m][0], values[m][1], names=tuple(names))))
        return out
    kw = {m: kruskal_wallis(values[m], names) for m in METRIC_NAMES}
    out.extend(AxisStat(axis, m, kw[m]) for m in METRIC_NAMES)
    if any(r.significant for r in kw.values()):
        for m in METRIC_NAMES:
            out.extend(AxisStat(axis, m, r) for r in dunn_posthoc(values[m], names))
    return out


# ------------------------------------------------------------------- study


@dataclass
class Pipeline:
    """Concrete settings implied by a set of axis choices."""

    use_subtraction: bool
    modalities: tuple
    arch: ArchitectureId
    pretrain: PretrainKind
    use_clinical: bool

    @classmethod
    def from_choices(cls, choices: Mapping[str, Any]) -> "Pipeline":
        return cls(
            use_subtraction=_as_bool(choices["Subtraction"]),
            modalities=parse_modality_key(str(choices["Modalities"])),
            arch=ArchitectureId(choices["Architecture"]),
            pretrain=PretrainKind(choices["Pretraining"]),
            use_clinical=_as_bool(choices["ClinicalData"]),
        )

    def input_spec(self, clinical_dim: int) -> InputSpec:
        return InputSpec(self.modalities, self.use_subtraction, self.use_clinical, clinical_dim if self.use_clinical else 0)

    def slug(self) -> str:
        return "_".join([
            "sub" if self.use_subtraction else "nosub",
            modality_key(self.modalities).replace("+", "-"),
            self.arch.value,
            self.pretrain.value,
            "clin" if self.use_clinical else "noclin",
        ])


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("true", "yes", "1", "on"):
        return True
    if str(v).lower() in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean option: {v!r}")


class Study:
    """Filesystem-backed study state shared by all CLI subcommands."""

    def __init__(self, cfg: StudyConfig, progress=print):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache_dir = Path(cfg.data.cache_dir or self.out / "cache")
        self.progress = progress or (lambda _msg: None)
        self._index: DatasetIndex | None = None
        self._filtered = None
        self._cache_map: dict[str, str | None] | None = None
        self._clinical = None

    # ---- ingest

    def index(self) -> DatasetIndex:
        if self._index is None:
            if not self.cfg.data.root:
                raise ValueError("config data.root is not set")
            self._index = index_dataset(self.cfg.data.root, self.cfg.data.metadata)
            for err in self._index.errors:
                logger.warning("metadata: %s", err)
        return self._index

    def filtered(self):
        if self._filtered is None:
            idx = self.index()
            self._filtered = filter_timepoints(idx.records, idx.surgery_weeks, self.cfg.data.min_gap_weeks)
        return self._filtered

    def ingest(self) -> dict:
        idx = self.index()
        filtered = self.filtered()
        summary = {
            "sessions": len(idx.records),
            "retained_timepoints": len(filtered),
            "metadata_errors": idx.errors,
            "modality_sets": {},
        }
        for mods in STUDY_MODALITY_SETS:
            samples = pair_consecutive(filtered, mods)
            key = modality_key(mods)
            write_manifest(samples, self.out / "manifests" / f"{key}.jsonl")
            cs = cohort_summary(samples)
            summary["modality_sets"][key] = {"samples": len(samples), "counts": cs.count_vector().tolist()}
        (self.out / "ingest_summary.json").write_text(json.dumps(summary, indent=1))
        return summary

    # ---- preprocess

    def preprocess(self) -> dict[str, str | None]:
        paths = sorted({p for r in self.filtered() for p in r.image_paths.values()})
        entries = preprocess_paths(
            paths, self.cfg.data.template, self.cache_dir, self.cfg.preprocess,
            workers=self.cfg.workers, log_path=self.out / "preprocess_log.tsv",
        )
        self._cache_map = {src: e.output for src, e in entries.items()}
        (self.out / "preprocess_map.json").write_text(json.dumps(self._cache_map, indent=1, sort_keys=True))
        flagged = sum(1 for v in self._cache_map.values() if v is None)
        self.progress(f"preprocessed {len(entries)} volumes ({flagged} flagged)")
        return self._cache_map

    def cache_map(self) -> dict[str, str | None]:
        if self._cache_map is None:
            p = self.out / "preprocess_map.json"
            self._cache_map = json.loads(p.read_text()) if p.exists() else self.preprocess()
        return self._cache_map

    @functools.cached_property
    def _loader(self):
        cmap = self.cache_map()

        @functools.lru_cache(maxsize=512)
        def load(path: str) -> np.ndarray:
            out = cmap.get(path)
            if out is None:
                raise FileNotFoundError(f"{path} has no preprocessed volume (flagged or never preprocessed)")
            return load_volume(out).voxels.astype(np.float32)

        return load

    def image_shape(self) -> tuple[int, int, int]:
        if self.cfg.data.template:
            return load_volume(self.cfg.data.template).shape
        first = next(v for v in self.cache_map().values() if v)
        return load_volume(first).shape

    # ---- cohorts and folds

    def samples(self, modalities) -> list[StudySample]:
        mods = canonical_modalities(modalities)
        cmap = self.cache_map()
        out = []
        for s in pair_consecutive(self.filtered(), mods):
            paths = [tp.image_paths[m] for tp in (s.prev, s.curr) for m in mods]
            if all(cmap.get(p) for p in paths):
                out.append(s)
            else:
                logger.info("excluding %s: a required volume was flagged during preprocessing", s.id)
        return out

    def fold_plan(self, modalities) -> FoldPlan:
        key = modality_key(modalities)
        path = self.out / "folds" / f"{key}.json"
        if path.exists():
            return FoldPlan.load(path)
        plan = make_folds(
            self.samples(modalities), self.cfg.folds.n_folds,
            seed=derive_seed(self.cfg.seed, "folds", key), group_by_patient=self.cfg.folds.group_by_patient,
        )
        plan.save(path)
        return plan

    def split(self) -> dict[str, FoldPlan]:
        keys = {str(o) for o in self.cfg.axes.get("Modalities", DEFAULT_OPTIONS["Modalities"])}
        return {k: self.fold_plan(parse_modality_key(k)) for k in sorted(keys)}

    # ---- clinical

    def clinical_vectors(self):
        if self._clinical is None:
            if not self.cfg.data.clinical:
                raise ValueError("clinical data requested but data.clinical is not set")
            self._clinical = load_clinical_table(self.cfg.data.clinical)
        return self._clinical

    def _encoded_clinical(self, train_patients: Iterable[str], patients: Iterable[str]) -> tuple[dict, int]:
        table = self.clinical_vectors()
        enc = ClinicalEncoder.fit([table[p] for p in set(train_patients) if p in table], self.cfg.data.include_survival)
        missing = sorted({p for p in patients if p not in table})
        if missing:
            raise ValueError(f"no clinical row for patients {missing[:5]}")
        return {p: enc.encode(table[p]) for p in set(patients)}, enc.dim

    # ---- training one fold

    def datasets(self, pipe: Pipeline, plan: FoldPlan, fold: int, samples: Sequence[StudySample]):
        train, test = plan.split(samples, fold)
        clinical, dim = ({}, 0)
        if pipe.use_clinical:
            clinical, dim = self._encoded_clinical([s.patient_id for s in train], [s.patient_id for s in samples])
        spec = pipe.input_spec(dim)
        return spec, CohortDataset(train, spec, self._loader, clinical), CohortDataset(test, spec, self._loader, clinical)

    def train_one(
        self,
        choices: Mapping[str, Any],
        fold: int,
        seed_path: Sequence,
        out_dir: Path,
    ) -> tuple[MetricsReport, dict]:
        pipe = Pipeline.from_choices(choices)
        samples = self.samples(pipe.modalities)
        plan = self.fold_plan(pipe.modalities)
        spec, train_ds, test_ds = self.datasets(pipe, plan, fold, samples)
        if len(train_ds) == 0 or len(test_ds) == 0:
            raise ValueError(f"fold {fold} has an empty split ({len(train_ds)} train / {len(test_ds)} test)")
        shape = self.image_shape()
        init_seed = derive_seed(*seed_path, fold, "init")
        model = build_model(pipe.arch, spec, init_seed, shape, **self.cfg.model_kwargs.get(pipe.arch.value, {}))
        task = PretrainTask(
            kind=pipe.pretrain,
            source={PretrainKind.organ: self.cfg.pretraining.organ_source,
                    PretrainKind.checkpoint: self.cfg.pretraining.checkpoint_source}.get(pipe.pretrain),
            epochs=self.cfg.pretraining.epochs,
            lr=self.cfg.pretraining.lr,
        )
        volumes = None
        if pipe.pretrain is PretrainKind.rotation:
            ids = train_ds.ids[: self.cfg.pretraining.max_volumes]
            volumes = np.stack([train_ds.get(i)[0] for i in ids])
        model, pre_info = pretrain(task, model, volumes=volumes, image_shape=shape, seed=derive_seed(*seed_path, fold, "pretrain"))
        tcfg = dataclasses.replace(self.cfg.train, seed=derive_seed(*seed_path, fold, "train"))
        policy = None
        if self.cfg.augmentation is not None:
            policy = dataclasses.replace(self.cfg.augmentation, seed=tcfg.seed)
        result = train_fold(
            model, train_ds, test_ds, tcfg, policy,
            log_path=out_dir / f"fold{fold}.trainlog.jsonl",
            progress=lambda line: self.progress(f"[{'/'.join(map(str, seed_path[1:]))} fold {fold}] {line}"),
        )
        out = predict(model, test_ds)
        metrics = compute_metrics(out.predicted, test_ds.labels)
        ckpt = save_checkpoint(
            out_dir / f"fold{fold}.pt", model, spec, tcfg.config_hash(), fold, shape,
            extra={"choices": {k: option_id(v) for k, v in choices.items()}, "pretrain": pre_info,
                   "best_epoch": result.log.best_epoch, "study_config_hash": self.cfg.hash()},
        )
        info = {"checkpoint": str(ckpt), "best_epoch": result.log.best_epoch,
                "n_train": len(train_ds), "n_test": len(test_ds), "pretrain": pre_info}
        return metrics, info

    def _record_hash(self, choices: Mapping[str, Any], fold: int) -> str:
        payload = {
            "choices": {k: option_id(v) for k, v in sorted(choices.items())},
            "fold": fold,
            "seed": self.cfg.seed,
            "train": asdict(self.cfg.train),
            "preprocess": asdict(self.cfg.preprocess),
            "augmentation": None if self.cfg.augmentation is None else asdict(self.cfg.augmentation),
            "pretraining": asdict(self.cfg.pretraining),
            "folds": asdict(self.cfg.folds),
            "model_kwargs": self.cfg.model_kwargs,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]

    # ---- axes and the full study

    def run_axis(self, axis: ApproachAxis, frozen: Mapping[str, Any], store: RecordStore):
        """Train every option of ``axis`` on every fold; returns (winner, records, stats)."""
        name = axis.name.value
        if len(axis.options) == 1:
            only = axis.options[0]
            self.progress(f"axis {name}: single option {option_id(only)} wins without training")
            return only, [], []
        for opt in axis.options:
            oid = option_id(opt)
            choices = {**frozen, name: opt}
            folds = range(self.cfg.folds.n_folds)
            for fold in folds:
                if (name, oid, fold) in store:
                    continue
                out_dir = self.out / "runs" / name / oid.replace("+", "-")
                t0 = time.perf_counter()
                try:
                    metrics, info = self.train_one(choices, fold, (self.cfg.seed, name, oid), out_dir)
                    rec = ExperimentRecord(
                        name, oid, fold, metrics, self._record_hash(choices, fold), info["checkpoint"],
                        time.perf_counter() - t0, "complete", "", dict(choices), info["best_epoch"],
                        info["n_train"], info["n_test"],
                    )
                except Exception as exc:  # any fold failure marks the option incomplete
                    logger.error("axis %s option %s fold %d failed: %s", name, oid, fold, exc)
                    rec = ExperimentRecord(
                        name, oid, fold, None, self._record_hash(choices, fold), None,
                        time.perf_counter() - t0, "failed", f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}",
                        dict(choices),
                    )
                store.append(rec)
                if rec.status == "failed":
                    break
        records = store.records(name)
        reports, notes = option_reports(records, self.cfg.folds.n_folds)
        for opt, note in notes.items():
            self.progress(f"axis {name}: option {opt} {note}")
        channels = {}
        for opt in axis.options:
            pipe = Pipeline.from_choices({**frozen, name: opt})
            channels[option_id(opt)] = pipe.input_spec(0).channel_count
        win_id = select_winner(reports, channels)
        if win_id is None:
            raise RuntimeError(f"axis {name}: every option failed; see records for details")
        stats = axis_statistics(name, reports)
        winner = next(o for o in axis.options if option_id(o) == win_id)
        return winner, records, stats

    def ablate(self) -> dict:
        write_config_snapshot(self.cfg, self.out, "ablate")
        self.cache_map()
        store = RecordStore(self.out / "records.jsonl")
        frozen = self.cfg.initial_choices()
        chain = []
        all_stats: list[AxisStat] = []
        notes: dict[str, dict[str, str]] = {}
        for axis in self.cfg.axis_list():
            winner, records, stats = self.run_axis(axis, frozen, store)
            frozen[axis.name.value] = winner
            _, notes[axis.name.value] = option_reports(records, self.cfg.folds.n_folds)
            all_stats.extend(stats)
            chain.append({"axis": axis.name.value, "winner": option_id(winner),
                          "options": [option_id(o) for o in axis.options]})
            self.progress(f"axis {axis.name.value}: winner {option_id(winner)}")
        with (self.out / "stats.jsonl").open("w") as fh:
            for s in all_stats:
                fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
        final = self._final_model(store, chain)
        summary = {
            "study": self.cfg.name,
            "config_hash": self.cfg.hash(),
            "winner_chain": chain,
            "final_choices": {k: option_id(v) for k, v in frozen.items()},
            "final_model": final,
            "incomplete": notes,
        }
        (self.out / "study_summary.json").write_text(json.dumps(summary, indent=1))
        if final and final.get("checkpoint"):
            self.explain(final["checkpoint"], self.out / "explain")
        return summary

    def _final_model(self, store: RecordStore, chain: list[dict]) -> dict | None:
        """Best fold of the last decided axis's winner, identified from records."""
        for step in reversed(chain):
            recs = [r for r in store.records(step["axis"]) if r.option == step["winner"] and r.status == "complete"]
            if recs:
                best = max(recs, key=lambda r: (r.metrics.balanced_accuracy, r.metrics.f1, -r.fold))
                return {"axis": best.axis, "option": best.option, "fold": best.fold, "checkpoint": best.checkpoint,
                        "balanced_accuracy": best.metrics.balanced_accuracy}
        return None

    # ---- standalone train / evaluate / explain

    def train(self, choices: Mapping[str, Any] | None = None, folds: Sequence[int] | None = None) -> list[dict]:
        choices = {**self.cfg.initial_choices(), **(choices or {})}
        pipe = Pipeline.from_choices(choices)
        out_dir = self.out / "train" / pipe.slug()
        write_config_snapshot(self.cfg, out_dir, "train")
        results = []
        for fold in folds if folds is not None else range(self.cfg.folds.n_folds):
            metrics, info = self.train_one(choices, fold, (self.cfg.seed, "train", pipe.slug()), out_dir)
            results.append({"fold": fold, **metrics.as_dict(), **{k: v for k, v in info.items() if k != "pretrain"}})
        (out_dir / "metrics.json").write_text(json.dumps(results, indent=1))
        return results

    def _checkpoint_context(self, checkpoint: str | Path):
        model, meta = load_checkpoint(checkpoint)
        spec: InputSpec = meta["input_spec"]
        choices = meta.get("extra", {}).get("choices")
        pipe = Pipeline.from_choices(choices) if choices else None
        if pipe is None:
            pipe = Pipeline(spec.use_subtraction, spec.modalities, ArchitectureId(meta["arch"]), PretrainKind.none, spec.use_clinical)
        samples = self.samples(spec.modalities)
        plan = self.fold_plan(spec.modalities)
        _, train_ds, test_ds = self.datasets(pipe, plan, int(meta["fold"]), samples)
        return model, meta, train_ds, test_ds

    def evaluate(self, checkpoint: str | Path, literal: bool = False) -> dict:
        model, meta, _, test_ds = self._checkpoint_context(checkpoint)
        out = predict(model, test_ds)
        metrics = compute_metrics(out.predicted, test_ds.labels, literal=literal)
        result = {"checkpoint": str(checkpoint), "fold": meta["fold"], "literal_weighting": literal,
                  "n_test": len(test_ds), **metrics.as_dict()}
        dest = Path(checkpoint).with_suffix(".eval.json" if not literal else ".eval_literal.json")
        dest.write_text(json.dumps(result, indent=1))
        return result

    def explain(self, checkpoint: str | Path, out_dir: str | Path, sample_ids: Sequence[str] | None = None) -> list[dict]:
        from .explain import (
            dice_overlap, evenly_spaced_slices, grad_cam, render_overlay, saliency,
            save_attribution, write_probability_table,
        )

        out_dir = Path(out_dir)
        write_config_snapshot(self.cfg, out_dir, "explain")
        model, meta, _, test_ds = self._checkpoint_context(checkpoint)
        spec: InputSpec = meta["input_spec"]
        ids = list(sample_ids) if sample_ids else test_ds.ids[: self.cfg.explain.n_samples]
        ref_mod = next((m for m in spec.modalities if m.value == "T2W"), spec.modalities[0])
        template = load_volume(self.cfg.data.template) if self.cfg.data.template else None
        rows = []
        for sid in ids:
            x, y, clin = test_ds.get(sid)
            probs = predict_single(model, x, clin)
            target = "predicted" if self.cfg.explain.target == "predicted" else ("ground_truth", y)
            cam = grad_cam(model, x, target, self.cfg.explain.layer, clin)
            sal = saliency(model, x, cam.target_class, clin, channel_names=spec.channel_names())
            sal_total = _as_attr(np.sum([s.values for s in sal], axis=0), sal[0], cam.target_mode)
            dice = dice_overlap(cam.values, sal_total.values)
            sample = test_ds._by_id[sid]
            ref_path = self.cache_map()[sample.curr.image_paths[ref_mod]]
            ref = load_volume(ref_path)
            stem = sid.replace(":", "_")
            slices = evenly_spaced_slices(ref.shape[2], self.cfg.explain.n_slices)
            render_overlay(ref, cam.normalized(), slices, out_dir / f"{stem}_gradcam.png", probs,
                           title=f"{sid} (true {CLASS_ORDER[y].value})")
            render_overlay(ref, sal_total, slices, out_dir / f"{stem}_saliency.png", probs,
                           title=f"{sid} (true {CLASS_ORDER[y].value})")
            grid = template if template is not None and template.shape == cam.values.shape else ref
            save_attribution(cam, grid, out_dir / f"{stem}_gradcam.nii.gz")
            save_attribution(sal_total, grid, out_dir / f"{stem}_saliency.nii.gz")
            rows.append({
                "sample_id": sid, "true_label": CLASS_ORDER[y].value,
                "predicted": CLASS_ORDER[int(np.argmax(probs))].value,
                **{f"p_{c.value}": float(p) for c, p in zip(CLASS_ORDER, probs)},
                "dice_top_decile": dice, "target_mode": cam.target_mode,
            })
        write_probability_table(rows, out_dir / "probabilities.tsv")
        (out_dir / "explain_summary.json").write_text(json.dumps(
            {"checkpoint": str(checkpoint), "target_mode": self.cfg.explain.target, "samples": rows}, indent=1))
        return rows


def predict_single(model, x: np.ndarray, clinical) -> np.ndarray:
    import torch

    model.eval()
    with torch.no_grad():
        c = None if clinical is None else torch.from_numpy(np.asarray(clinical, dtype=np.float32))[None]
        logits = model(torch.from_numpy(np.asarray(x, dtype=np.float32))[None], c)
    return torch.softmax(logits.double(), dim=1)[0].numpy()


def _as_attr(values: np.ndarray, like, target_mode: str | None = None):
    from .explain import AttributionVolume, Normalization

    return AttributionVolume(values, like.method, like.target_class, Normalization.raw,
                             target_mode or like.target_mode, channel="sum")


def load_stats(path: str | Path) -> list[AxisStat]:
    path = Path(path)
    if not path.exists():
        return []
    return [AxisStat.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
