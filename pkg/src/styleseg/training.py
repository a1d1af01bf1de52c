"""Training, affine-only fine-tuning, thresholding and evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import functional as F
from .conditioning import FULL, IMAGE, NAIVE, NORM_AFFINE_ONLY, UnknownSource, trainable_mask
from .data import Sample, stack
from .metrics import MetricReport, evaluate_masks
from .model import SegmentationNet, clone, load_state, state_dict
from .optim import AdamW, MultiStepLR
from .rng import Rng
from .tensor import NonFiniteError, no_grad

log = logging.getLogger(__name__)

THRESHOLD_GRID = np.arange(101) / 100.0


class TrainingDiverged(RuntimeError):
    """The loss or a gradient went non-finite."""


class EmptyLabelsWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    milestones: tuple[int, ...] = (30, 45)
    gamma: float = 0.5
    augment: bool = True
    rotation_deg: float = 10.0
    translation_px: float = 3.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0
    trainable: str = FULL

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.milestones = tuple(int(m) for m in self.milestones)
        self.scale_range = tuple(self.scale_range)
        self.contrast_range = tuple(self.contrast_range)
        if not 0 < self.lr < 1:
            raise ValueError(f"lr must be in (0, 1), got {self.lr}")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError(f"milestones must be ascending, got {list(self.milestones)}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.trainable not in (FULL, NORM_AFFINE_ONLY):
            raise ValueError(f"trainable must be {FULL!r} or {NORM_AFFINE_ONLY!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- augmentation -----------------------------------------------------------

def affine_matrix(angle_deg: float, scale: float, shift: tuple[float, float], shape: tuple[int, int]):
    """Output->input mapping for rotate/scale about the centre, then shift."""
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    inv = rot.T / scale
    centre = (np.array(shape, dtype=np.float64) - 1) / 2
    offset = centre - inv @ (centre + np.asarray(shift, dtype=np.float64))
    return inv, offset


def warp(image: np.ndarray, label: np.ndarray, angle_deg: float, scale: float,
         shift: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Apply one geometric transform to an image (bilinear) and its label (nearest)."""
    mat, off = affine_matrix(angle_deg, scale, shift, label.shape)
    img = np.stack([ndimage.affine_transform(ch, mat, off, order=1, mode="nearest") for ch in image])
    lab = ndimage.affine_transform(label.astype(np.float64), mat, off, order=0, mode="constant", cval=0.0)
    return img, lab


def adjust_contrast(image: np.ndarray, gain: float) -> np.ndarray:
    mean = image.mean(axis=(-2, -1), keepdims=True)
    return mean + gain * (image - mean)


def augment_batch(images: np.ndarray, labels: np.ndarray, gen: np.random.Generator,
                  cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Random affine (image + label) and random contrast (image only)."""
    out_i = np.empty_like(images)
    out_l = np.empty_like(labels)
    for k in range(images.shape[0]):
        angle = gen.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        scale = gen.uniform(*cfg.scale_range)
        shift = gen.uniform(-cfg.translation_px, cfg.translation_px, size=2)
        gain = gen.uniform(*cfg.contrast_range)
        img, lab = warp(images[k], labels[k, 0], angle, scale, tuple(shift))
        out_i[k] = adjust_contrast(img, gain)
        out_l[k, 0] = lab
    return out_i, out_l


# -- inference, thresholds, metrics ----------------------------------------

def query_sources(model: SegmentationNet, query: str | None, n: int) -> list | None:
    if model.mode.kind in (NAIVE, IMAGE) or query is None:
        return None if model.mode.kind in (NAIVE, IMAGE) else _missing_query(model)
    if query not in model.bank.source_map:
        raise UnknownSource(query)
    return [query] * n


def _missing_query(model):
    raise ValueError(f"a {model.mode.kind} model needs a source to condition on")


def predict(model: SegmentationNet, samples: Sequence[Sample], query: str | None = None,
            batch_size: int = 16) -> np.ndarray:
    """Foreground probabilities (K, H, W) with every item conditioned on ``query``."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            images = np.stack([s.image for s in chunk])
            logits = model(images, query_sources(model, query, len(chunk)))
            out.append(F.sigmoid(logits.data[:, 0]))
    return np.concatenate(out)


def select_threshold(scores, labels, grid: np.ndarray = THRESHOLD_GRID) -> float:
    """Grid threshold with the best segmentation F1 (``pred = score >= t``).

    Ties go to the lowest threshold. With no positive labels at all the
    choice is meaningless; 0.5 is returned with an EmptyLabelsWarning.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    g = np.asarray(labels).astype(bool).ravel()
    if s.size == 0:
        raise ValueError("select_threshold needs a non-empty validation pool")
    positives = int(g.sum())
    if positives == 0:
        warnings.warn("no positive labels; falling back to threshold 0.5", EmptyLabelsWarning, stacklevel=2)
        return 0.5
    pos_sorted = np.sort(s[g])
    all_sorted = np.sort(s)
    tp = positives - np.searchsorted(pos_sorted, grid, side="left")
    predicted = s.size - np.searchsorted(all_sorted, grid, side="left")
    f1 = 2.0 * tp / (predicted + positives)
    return float(grid[int(np.argmax(f1))])


def evaluate(model: SegmentationNet, val: Sequence[Sample], test: Sequence[Sample],
             query: str | None = None, small_size: int = 10) -> MetricReport:
    """Threshold on ``val``, then score ``test``, both conditioned on ``query``."""
    threshold = select_threshold(predict(model, val, query), np.stack([s.label for s in val]))
    scores = predict(model, test, query)
    return evaluate_masks(scores, np.stack([s.label for s in test]), threshold, small_size)


def default_query(model: SegmentationNet, cohort: str) -> str | None:
    return None if model.mode.kind in (NAIVE, IMAGE) else cohort


def evaluate_matrix(model: SegmentationNet, val_sets: dict[str, Sequence[Sample]],
                    test_sets: dict[str, Sequence[Sample]], styles: Sequence[str | None]
                    ) -> dict[tuple[str | None, str], MetricReport]:
    """Every query style against every test cohort, thresholds tuned per cell on validation."""
    out = {}
    for style in styles:
        if style is not None and model.bank is not None and style not in model.bank.source_map:
            raise UnknownSource(style)
        for cohort in test_sets:
            out[(style, cohort)] = evaluate(model, val_sets[cohort], test_sets[cohort], style)
    return out


MATRIX_FIELDS = ("style", "cohort", "dice", "pr_auc", "detection_f1", "small_lesion_f1", "threshold_used",
                 "component_count_pred", "component_count_gt")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def matrix_rows(matrix: dict, label: str | None = None) -> list[dict]:
    rows = []
    for (style, cohort), rep in matrix.items():
        row = {"style": style if style is not None else (label or "pooled"), "cohort": cohort}
        row.update(rep.as_dict())
        rows.append(row)
    return rows


def write_table(rows: list[dict], directory, stem: str = "results", fields: Sequence[str] | None = None) -> None:
    """``<stem>.csv`` and ``<stem>.json``, deterministic in content and order."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fields = list(fields or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(r.get(k, "")) for k in fields})
    (d / f"{stem}.csv").write_text(buf.getvalue())
    clean = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in rows]
    (d / f"{stem}.json").write_text(json.dumps(clean, indent=2) + "\n")


# -- training ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    lr: float
    val_dice: dict[str, float] = field(default_factory=dict)

    @property
    def mean_val_dice(self) -> float:
        return float(np.mean(list(self.val_dice.values()))) if self.val_dice else float("nan")


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def to_rows(self) -> list[dict]:
        rows = []
        for r in self.records:
            row = {"epoch": r.epoch, "train_loss": r.train_loss, "lr": r.lr}
            for k in sorted(r.val_dice):
                row[f"val_dice_{k}"] = r.val_dice[k]
            row["val_dice_mean"] = r.mean_val_dice
            rows.append(row)
        return rows

    def write_csv(self, path) -> None:
        rows = self.to_rows()
        buf = io.StringIO()
        fields = list(rows[0].keys()) if rows else ["epoch", "train_loss", "lr", "val_dice_mean"]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
        Path(path).write_text(buf.getvalue())


def _by_cohort(samples: Sequence[Sample]) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {}
    for s in samples:
        out.setdefault(s.source, []).append(s)
    return out


def validation_dice(model: SegmentationNet, val: Sequence[Sample]) -> dict[str, float]:
    """Dice per cohort at that cohort's best validation threshold."""
    from .metrics import dice

    out = {}
    for cohort, items in _by_cohort(val).items():
        query = default_query(model, cohort)
        if query is not None and query not in model.bank.source_map:
            continue
        scores = predict(model, items, query)
        labels = np.stack([s.label for s in items])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyLabelsWarning)
            t = select_threshold(scores, labels)
        out[cohort] = dice(scores >= t, labels)
    return out


def train(model: SegmentationNet, train_set: Sequence[Sample], val_set: Sequence[Sample],
          config: TrainConfig, sources_override: str | None = None) -> History:
    """Train ``model`` in place and leave it at its best-validation state.

    Each item is conditioned on its own cohort id (or on
    ``sources_override`` when given). The kept state is the one with the
    highest mean validation Dice over cohorts; with zero epochs the model
    is left untouched.
    """
    history = History()
    if config.epochs == 0 or not train_set:
        return history
    root = Rng(config.seed)
    shuffle_gen = root.stream("data", "shuffle")
    aug_gen = root.stream("augmentation")
    drop_gen = root.stream("dropout")

    trainable = trainable_mask(config.trainable, model)
    frozen = [p for name, p in model.parameters().items() if name not in trainable]
    for p in frozen:
        p.requires_grad = False
    params = list(trainable.values())
    opt = AdamW(params, config.lr, config.betas, weight_decay=config.weight_decay)
    sched = MultiStepLR(opt, config.milestones, config.gamma)

    images_all, labels_all, sources_all = stack(train_set)
    if sources_override is not None:
        sources_all = [sources_override] * len(sources_all)
    best_state, best_score = None, -math.inf
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = shuffle_gen.permutation(len(train_set))
            losses = []
            lr = opt.lr
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                images, labels = images_all[idx], labels_all[idx]
                if config.augment:
                    images, labels = augment_batch(images, labels, aug_gen, config)
                srcs = [sources_all[i] for i in idx]
                step += 1
                opt.zero_grad()
                try:
                    loss = F.bce_loss(model(images, srcs, rng=drop_gen), labels)
                    loss.backward()
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
                opt.step()
                losses.append(loss.item())
            sched.step()
            record = EpochRecord(epoch, float(np.mean(losses)), lr, validation_dice(model, val_set))
            history.records.append(record)
            score = record.mean_val_dice if record.val_dice else -record.train_loss
            if score > best_score:
                best_score = score
                best_state = state_dict(model)
                history.best_epoch = epoch
            log.debug("epoch %d loss %.4f val %s", epoch, record.train_loss, record.val_dice)
    finally:
        for p in frozen:
            p.requires_grad = True
        model.eval()
    if best_state is not None:
        load_state(model, best_state)
    return history


def finetune(model: SegmentationNet, samples: Sequence[Sample], config: TrainConfig, new_source: str,
             val_set: Sequence[Sample] = (), copy_from: str | None = None) -> tuple[SegmentationNet, History]:
    """Adapt a copy of ``model`` to a new source by training only norm affines.

    A bank-conditioned model gets a fresh parameter set for ``new_source``
    (at (1, 0), or copied from ``copy_from``); an image-conditioned model
    tunes its FiLM heads. Every other parameter stays bitwise identical.
    """
    if len(samples) < 1:
        raise ValueError("fine-tuning needs at least one labelled sample")
    tuned = clone(model)
    if tuned.bank is not None:
        tuned.add_source(new_source, copy_from)
        query = new_source
    else:
        query = None
    cfg = TrainConfig.from_dict({**config.to_dict(), "trainable": NORM_AFFINE_ONLY})
    relabel = lambda items: [Sample(s.image, s.label, s.base_truth, new_source, s.has_marker, s.index,
                                    s.split_key) for s in items]
    history = train(tuned, relabel(samples), relabel(val_set), cfg, sources_override=query)
    return tuned, history
