"""Training loop, epoch protocol and pretraining hooks."""

from __future__ import annotations

import copy
import enum
import hashlib
import itertools
import json
import logging
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .cohort import StudySample
from .models import InputSpec, ModelOutput, VolumeClassifier, assemble_input
from .sampling import (
    AugmentationPolicy,
    augment,
    class_loss_weights_from_labels,
    compute_sample_weights,
    sample_rng,
    weighted_draw,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 4
    max_epochs: int = 100
    patience: int = 10
    lr_decay_factor: float = 10.0
    seed: int = 0
    selection: str = "test"  # "test" or "validation" (three-way split)
    validation_fraction: float = 0.2
    track_train_accuracy: bool = False

    def __post_init__(self):
        for name in ("lr", "weight_decay", "batch_size", "max_epochs", "patience", "lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.selection not in ("test", "validation"):
            raise ValueError(f"unknown selection mode {self.selection!r}")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class StopReason(str, enum.Enum):
    early_stop = "early_stop"
    max_epochs = "max_epochs"


class EpochController:
    """Early stopping on the selection loss and step decay of the learning rate.

    The learning rate is divided by ``decay_factor`` after every epoch whose
    mean training loss is not strictly below the previous epoch's. Training
    stops once the selection loss has gone ``patience`` epochs without a strict
    improvement, or at ``max_epochs``. The two mechanisms are independent.
    """

    def __init__(self, lr: float, patience: int = 10, max_epochs: int = 100, decay_factor: float = 10.0):
        self.lr = lr
        self.patience = patience
        self.max_epochs = max_epochs
        self.decay_factor = decay_factor
        self.epoch = -1
        self.best_loss = float("inf")
        self.best_epoch = -1
        self.since_improvement = 0
        self.prev_train: float | None = None
        self.stop_reason: StopReason | None = None

    def step(self, train_loss: float, selection_loss: float) -> bool:
        """Record one finished epoch; returns True when training should stop."""
        self.epoch += 1
        if selection_loss < self.best_loss:
            self.best_loss = selection_loss
            self.best_epoch = self.epoch
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        if self.prev_train is not None and not train_loss < self.prev_train:
            self.lr /= self.decay_factor
        self.prev_train = train_loss
        if self.since_improvement >= self.patience:
            self.stop_reason = StopReason.early_stop
        elif self.epoch + 1 >= self.max_epochs:
            self.stop_reason = StopReason.max_epochs
        return self.stop_reason is not None

    @property
    def improved_last(self) -> bool:
        return self.best_epoch == self.epoch


def weighted_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, class_weights: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``w[y] * -log softmax(logits)[y]``.

    Normalised by the batch size, not by the summed weights, so uniform
    weights of 4 give four times the plain cross-entropy.
    """
    nll = F.cross_entropy(logits, targets, reduction="none")
    return (class_weights.to(logits.dtype)[targets] * nll).mean()


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    test_loss: float
    lr: float
    seconds: float
    selection_loss: float | None = None
    train_accuracy: float | None = None
    batch_accuracy: float | None = None


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: StopReason | None = None

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for e in self.epochs:
                fh.write(json.dumps({"type": "epoch", **asdict(e)}) + "\n")
            fh.write(json.dumps({
                "type": "summary",
                "best_epoch": self.best_epoch,
                "stop_reason": self.stop_reason.value if self.stop_reason else None,
            }) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "TrainLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            d = json.loads(line)
            kind = d.pop("type")
            if kind == "epoch":
                log.epochs.append(EpochLog(**d))
            else:
                log.best_epoch = d["best_epoch"]
                log.stop_reason = StopReason(d["stop_reason"]) if d["stop_reason"] else None
        return log


class NonFiniteLossError(RuntimeError):
    pass


# ------------------------------------------------------------------ datasets


class ArrayDataset:
    """In-memory examples: ``x`` is (N, C, D, H, W), ``y`` class indices."""

    def __init__(self, x: np.ndarray, y: Sequence[int], ids: Sequence[str] | None = None, clinical: np.ndarray | None = None):
        self.x = np.asarray(x, dtype=np.float32)
        self.labels = [int(v) for v in y]
        self.ids = list(ids) if ids is not None else [f"s{i:05d}" for i in range(len(self.labels))]
        self.clinical = None if clinical is None else np.asarray(clinical, dtype=np.float32)
        self._pos = {sid: i for i, sid in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def get(self, sid: str):
        i = self._pos[sid]
        return self.x[i], self.labels[i], None if self.clinical is None else self.clinical[i]

    def subset(self, ids: Sequence[str]) -> "ArrayDataset":
        idx = [self._pos[s] for s in ids]
        return ArrayDataset(self.x[idx], [self.labels[i] for i in idx], ids, None if self.clinical is None else self.clinical[idx])


class CohortDataset:
    """Lazily assembled StudySamples backed by preprocessed volumes."""

    def __init__(
        self,
        samples: Sequence[StudySample],
        spec: InputSpec,
        load: Callable[[str], np.ndarray],
        clinical: Mapping[str, np.ndarray] | None = None,
        cache_size: int = 64,
    ):
        self.samples = list(samples)
        self.spec = spec
        self.load = load
        self.clinical = clinical or {}
        self.ids = [s.id for s in self.samples]
        self.labels = [s.label.index for s in self.samples]
        self._by_id = {s.id: s for s in self.samples}
        self._cache: OrderedDict[str, tuple] = OrderedDict()
        self._cache_size = cache_size

    def __len__(self):
        return len(self.samples)

    def get(self, sid: str):
        if sid in self._cache:
            self._cache.move_to_end(sid)
            return self._cache[sid]
        s = self._by_id[sid]
        clin = self.clinical.get(s.patient_id) if self.spec.use_clinical else None
        x, c = assemble_input(s, self.spec, self.load, clin)
        item = (x, s.label.index, c)
        self._cache[sid] = item
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return item

    def subset(self, ids: Sequence[str]) -> "CohortDataset":
        chosen = set(ids)
        return CohortDataset([s for s in self.samples if s.id in chosen], self.spec, self.load, self.clinical, self._cache_size)


def _batches(ids: Sequence[str], size: int) -> list[list[str]]:
    out = [list(ids[i : i + size]) for i in range(0, len(ids), size)]
    # a single-sample batch breaks batch norm on 1-voxel feature maps
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2].extend(out.pop())
    return out


def _collate(dataset, ids, policy: AugmentationPolicy | None, seed: int, epoch: int):
    xs, ys, cs = [], [], []
    for sid in ids:
        x, y, c = dataset.get(sid)
        if policy is not None:
            x = augment(x, policy, sample_rng(seed, sid, epoch))
        xs.append(x)
        ys.append(y)
        cs.append(c)
    x = torch.from_numpy(np.stack(xs))
    y = torch.tensor(ys, dtype=torch.long)
    c = None if cs[0] is None else torch.from_numpy(np.stack(cs))
    return x, y, c


@torch.no_grad()
def evaluate_loss(model, dataset, class_weights: torch.Tensor, batch_size: int = 4) -> tuple[float, np.ndarray]:
    model.eval()
    total, n = 0.0, 0
    logits_all = []
    for ids in _batches(dataset.ids, batch_size):
        x, y, c = _collate(dataset, ids, None, 0, 0)
        logits = model(x, c)
        total += float(weighted_cross_entropy(logits, y, class_weights)) * len(ids)
        n += len(ids)
        logits_all.append(logits)
    return total / max(n, 1), torch.cat(logits_all).numpy() if logits_all else np.zeros((0, 4))


@torch.no_grad()
def predict(model: VolumeClassifier, dataset, batch_size: int = 4) -> ModelOutput:
    model.eval()
    out = []
    for ids in _batches(dataset.ids, batch_size):
        x, _, c = _collate(dataset, ids, None, 0, 0)
        out.append(model(x, c))
    return ModelOutput.from_logits(torch.cat(out))


def _stratified_holdout(ids: Sequence[str], labels: Sequence[int], fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    held = []
    for c in sorted(set(labels)):
        members = [sid for sid, y in zip(ids, labels) if y == c]
        rng.shuffle(members)
        held.extend(members[: int(round(len(members) * fraction))])
    held_set = set(held)
    return [s for s in ids if s not in held_set], [s for s in ids if s in held_set]


@dataclass
class TrainResult:
    state_dict: dict
    log: TrainLog
    class_weights: np.ndarray


def train_fold(
    model: VolumeClassifier,
    train_set,
    test_set,
    cfg: TrainConfig = TrainConfig(),
    policy: AugmentationPolicy | None = None,
    log_path: str | Path | None = None,
    progress: Callable[[str], None] | None = print,
) -> TrainResult:
    """Train on one fold and keep the weights of the lowest selection-loss epoch.

    The sampler weights (1 - prevalence) and the loss weights (1 / prevalence)
    come from the training split only. After the call ``model`` holds the
    best-epoch weights.
    """
    ids, labels = list(train_set.ids), list(train_set.labels)
    selection_set = test_set
    if cfg.selection == "validation":
        train_ids, val_ids = _stratified_holdout(ids, labels, cfg.validation_fraction, cfg.seed)
        selection_set = train_set.subset(val_ids)
        train_set = train_set.subset(train_ids)
        ids, labels = list(train_set.ids), list(train_set.labels)

    class_weights = torch.tensor(class_loss_weights_from_labels(labels), dtype=torch.float32)
    sampler = compute_sample_weights(ids, labels)
    controller = EpochController(cfg.lr, cfg.patience, cfg.max_epochs, cfg.lr_decay_factor)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = TrainLog()
    best_state = copy.deepcopy(model.state_dict())

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in itertools.count():
            t0 = time.perf_counter()
            for group in optimizer.param_groups:
                group["lr"] = controller.lr
            draw = weighted_draw(sampler, len(ids), np.random.default_rng([cfg.seed, epoch]))
            model.train()
            running, seen, hits = 0.0, 0, 0
            for batch_ids in _batches(draw, cfg.batch_size):
                x, y, c = _collate(train_set, batch_ids, policy, cfg.seed, epoch)
                optimizer.zero_grad()
                logits = model(x, c)
                loss = weighted_cross_entropy(logits, y, class_weights)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch} (lr={controller.lr:g}, batch={batch_ids})")
                loss.backward()
                optimizer.step()
                running += float(loss.detach()) * len(batch_ids)
                seen += len(batch_ids)
                hits += int((logits.detach().argmax(1) == y).sum())
            train_loss = running / seen
            test_loss, _ = evaluate_loss(model, test_set, class_weights, cfg.batch_size)
            sel_loss = test_loss
            if selection_set is not test_set:
                sel_loss, _ = evaluate_loss(model, selection_set, class_weights, cfg.batch_size)
            train_acc = None
            if cfg.track_train_accuracy:
                pred = predict(model, train_set, cfg.batch_size).predicted
                train_acc = float(np.mean(pred == np.asarray(labels)))
            lr_used = controller.lr
            stop = controller.step(train_loss, sel_loss)
            if controller.improved_last:
                best_state = copy.deepcopy(model.state_dict())
            entry = EpochLog(epoch, train_loss, test_loss, lr_used, time.perf_counter() - t0,
                             sel_loss if selection_set is not test_set else None, train_acc, hits / seen)
            log.epochs.append(entry)
            if progress is not None:
                acc = f" train_acc={train_acc:.3f}" if train_acc is not None else ""
                progress(f"epoch {epoch:3d} train_loss={train_loss:.4f} test_loss={test_loss:.4f} lr={lr_used:.1e}{acc}")
            if stop:
                break

    log.best_epoch = controller.best_epoch
    log.stop_reason = controller.stop_reason
    model.load_state_dict(best_state)
    if log_path is not None:
        log.write(log_path)
    return TrainResult(best_state, log, class_weights.numpy())


# --------------------------------------------------------------- pretraining


class PretrainKind(str, enum.Enum):
    none = "None"
    rotation = "RotationSelfSupervised"
    organ = "OrganClassification"
    checkpoint = "ExternalCheckpoint"


@dataclass(frozen=True)
class PretrainTask:
    kind: PretrainKind = PretrainKind.none
    source: str | None = None
    epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 4
    min_matched_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", PretrainKind(self.kind))


class CheckpointMatchError(RuntimeError):
    pass


def cube_rotations(shape: Sequence[int] | None = None) -> list[tuple[tuple[int, int, int], tuple[bool, bool, bool]]]:
    """Proper axis-aligned rotations as (axis permutation, axis flips).

    All 24 for cubic grids; for other shapes only those mapping the grid onto
    itself (identity plus half-turns, and quarter-turns about an axis whose two
    perpendicular sides are equal).
    """
    out = []
    for perm in itertools.permutations(range(3)):
        parity = sum(1 for i in range(3) for j in range(i + 1, 3) if perm[i] > perm[j]) % 2
        for flips in itertools.product((False, True), repeat=3):
            if (parity + sum(flips)) % 2:
                continue
            if shape is not None and tuple(shape[p] for p in perm) != tuple(shape):
                continue
            out.append((perm, flips))
    return out


def apply_rotation(x: np.ndarray, rotation) -> np.ndarray:
    """Rotate a (C, D, H, W) array; exact voxel permutation."""
    perm, flips = rotation
    y = np.transpose(x, (0, *(p + 1 for p in perm)))
    for axis, f in enumerate(flips):
        if f:
            y = np.flip(y, axis=axis + 1)
    return np.ascontiguousarray(y)


def _fit_head_task(model, x: np.ndarray, y: np.ndarray, n_classes: int, task: PretrainTask, seed: int) -> float:
    """Train backbone + a temporary ``n_classes`` head; returns final train accuracy."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model.reset_head(n_classes)
        opt = torch.optim.Adam(model.parameters(), lr=task.lr)
        rng = np.random.default_rng(seed)
        clin = torch.zeros(task.batch_size, model.clinical_dim) if model.clinical_dim else None
        for _ in range(task.epochs):
            model.train()
            order = rng.permutation(len(y))
            for ids in _batches(list(order), task.batch_size):
                xb = torch.from_numpy(x[ids])
                yb = torch.from_numpy(y[ids]).long()
                opt.zero_grad()
                cb = None if clin is None else torch.zeros(len(ids), model.clinical_dim)
                loss = F.cross_entropy(model(xb, cb), yb)
                loss.backward()
                opt.step()
    return task_accuracy(model, x, y)


@torch.no_grad()
def task_accuracy(model, x: np.ndarray, y: np.ndarray, batch_size: int = 8) -> float:
    model.eval()
    preds = []
    for i in range(0, len(y), batch_size):
        xb = torch.from_numpy(x[i : i + batch_size])
        cb = torch.zeros(len(xb), model.clinical_dim) if model.clinical_dim else None
        preds.append(model(xb, cb).argmax(1).numpy())
    return float(np.mean(np.concatenate(preds) == y))


def make_rotation_task(volumes: np.ndarray, seed: int = 0, copies: int = 1):
    """Rotated copies of (N, C, D, H, W) volumes with rotation-index labels."""
    rots = cube_rotations(volumes.shape[2:])
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for _ in range(copies):
        for v in volumes:
            k = int(rng.integers(len(rots)))
            xs.append(apply_rotation(v, rots[k]))
            ys.append(k)
    return np.stack(xs).astype(np.float32), np.array(ys), len(rots)


def load_organ_corpus(path: str | Path, channels: int, image_shape: Sequence[int] | None = None):
    """MedMNIST-style ``.npz`` (``train_images``, ``train_labels``) as model inputs.

    Volumes are rescaled to [0, 1], resized to ``image_shape`` when given and
    repeated across ``channels``.
    """
    data = np.load(path)
    imgs = data["train_images"].astype(np.float32)
    labels = data["train_labels"].reshape(-1).astype(int)
    if imgs.max() > 1.0:
        imgs = imgs / 255.0
    if image_shape is not None and tuple(imgs.shape[1:]) != tuple(image_shape):
        factors = [t / s for t, s in zip(image_shape, imgs.shape[1:])]
        imgs = np.stack([ndimage.zoom(v, factors, order=1) for v in imgs])
    x = np.repeat(imgs[:, None], channels, axis=1)
    return x.astype(np.float32), labels


def load_matching_weights(model: VolumeClassifier, path: str | Path, min_fraction: float = 0.5) -> float:
    """Copy same-name, same-shape backbone tensors from a checkpoint file.

    Returns the matched fraction of backbone tensors; raises when it is below
    ``min_fraction``.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    state = payload.get("state_dict", payload) if isinstance(payload, dict) else payload
    state = {k.removeprefix("module."): v for k, v in state.items()}
    backbone = model.backbone_state()
    matched = {k: v for k, v in state.items() if k in backbone and tuple(v.shape) == tuple(backbone[k].shape)}
    fraction = len(matched) / max(len(backbone), 1)
    logger.info("checkpoint %s: matched %d/%d backbone tensors (%.1f%%)", path, len(matched), len(backbone), 100 * fraction)
    if fraction < min_fraction:
        raise CheckpointMatchError(
            f"{path}: only {len(matched)}/{len(backbone)} backbone tensors match ({fraction:.1%} < {min_fraction:.0%})"
        )
    model.load_state_dict(matched, strict=False)
    return fraction


def pretrain(
    task: PretrainTask,
    model: VolumeClassifier,
    volumes: np.ndarray | None = None,
    image_shape: Sequence[int] | None = None,
    seed: int = 0,
) -> tuple[VolumeClassifier, dict]:
    """Initialise ``model`` from a pretraining task and reset a 4-class head.

    ``volumes`` (N, C, D, H, W) are the unlabelled inputs for the rotation task.
    """
    info: dict = {"kind": task.kind.value}
    n_classes = model.n_classes
    if task.kind is PretrainKind.none:
        return model, info
    if task.kind is PretrainKind.rotation:
        if volumes is None or len(volumes) == 0:
            raise ValueError("rotation pretraining needs unlabelled volumes")
        n_hold = max(1, len(volumes) // 5) if len(volumes) > 4 else 0
        fit_x, fit_y, n_rot = make_rotation_task(volumes[n_hold:], seed=seed, copies=4)
        info["n_rotations"] = n_rot
        info["train_accuracy"] = _fit_head_task(model, fit_x, fit_y, n_rot, task, seed)
        if n_hold:
            hx, hy, _ = make_rotation_task(volumes[:n_hold], seed=seed + 1, copies=4)
            info["heldout_accuracy"] = task_accuracy(model, hx, hy)
        info["chance"] = 1.0 / n_rot
    elif task.kind is PretrainKind.organ:
        if task.source is None:
            raise ValueError("organ pretraining needs a corpus path")
        x, y = load_organ_corpus(task.source, model.in_channels, image_shape)
        info["n_classes"] = int(y.max()) + 1
        info["train_accuracy"] = _fit_head_task(model, x, y, int(y.max()) + 1, task, seed)
    elif task.kind is PretrainKind.checkpoint:
        if task.source is None:
            raise ValueError("checkpoint pretraining needs a weight file")
        info["matched_fraction"] = load_matching_weights(model, task.source, task.min_matched_fraction)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model.reset_head(n_classes)
    return model, info
