"""Training loop, evaluation and run history."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from cov3d import ops
from cov3d.augment import AugmentConfig, apply_augmentations, center_eval_crop, sample_seed
from cov3d.checkpoint import Checkpoint, LoadReport, load_checkpoint, transfer_init
from cov3d.data import atomic_write_text, dataset_labels
from cov3d.metrics import MetricsReport, macro_f1
from cov3d.model import Module
from cov3d.optim import Adam, OptimHyper
from cov3d.tensor import Tensor, no_grad

HISTORY_COLUMNS = ("epoch", "train_loss", "val_macro_f1", "seconds")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    hyper: OptimHyper = field(default_factory=OptimHyper)
    init_ckpt: Optional[Union[str, Path, Checkpoint]] = None
    grad_accum_steps: int = 1
    eval_depth: Optional[int] = None  # default: augment.depth_crop_to when depth cropping, else full depth

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            # batch norm statistics in training mode need two samples per channel
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.grad_accum_steps < 1:
            raise ValueError(f"grad_accum_steps must be >= 1, got {self.grad_accum_steps}")
        if self.eval_depth is not None and self.eval_depth < 1:
            raise ValueError(f"eval_depth must be >= 1, got {self.eval_depth}")

    @property
    def resolved_eval_depth(self) -> Optional[int]:
        if self.eval_depth is not None:
            return self.eval_depth
        return self.augment.depth_crop_to if self.augment.depth_crop else None


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_macro_f1: float
    seconds: float


@dataclass
class History:
    rows: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_macro_f1), f"{r.seconds:.3f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))


@dataclass
class TrainResult:
    best: Checkpoint
    history: History
    best_epoch: int
    best_report: MetricsReport
    init_report: Optional[LoadReport] = None
    steps: int = 0

    def __iter__(self):
        # allows ``best, history = train(...)``
        return iter((self.best, self.history))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive chunks; a trailing single sample joins the previous batch."""
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def _stack(volumes) -> np.ndarray:
    shapes = {v.shape for v in volumes}
    if len(shapes) != 1:
        raise ValueError(f"cannot batch volumes of differing shapes {sorted(shapes)}")
    return np.stack([v.voxels for v in volumes])[:, None]


def check_model_input(model, shape: tuple) -> None:
    cfg = getattr(model, "config", None)
    if cfg is None:
        return
    if tuple(shape) != tuple(cfg.input_shape):
        raise ValueError(f"input shape {tuple(shape)} does not match the model's input_shape {tuple(cfg.input_shape)}")


def predict_logits(model: Module, volumes: Sequence, batch_size: int = 4) -> np.ndarray:
    """Eval-mode forward over already-cropped volumes; returns (N, C) float64 logits."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(volumes), batch_size):
            x = _stack(volumes[i:i + batch_size])
            check_model_input(model, x.shape[1:])
            out.append(np.asarray(model(Tensor(x)).data, dtype=np.float64))
    return np.concatenate(out)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def evaluate(model: Module, dataset, depth_to: Optional[int] = 64, batch_size: int = 4) -> MetricsReport:
    """Center-crop each volume to ``depth_to`` slices (``None`` keeps all), predict by argmax."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    labels, volumes = [], []
    for i in range(len(dataset)):
        vol, label = dataset[i]
        volumes.append(center_eval_crop(vol, depth_to) if depth_to is not None else vol)
        labels.append(int(label))
    logits = predict_logits(model, volumes, batch_size)
    num_classes = max(2, logits.shape[1])
    return macro_f1(logits.argmax(axis=1), labels, num_classes)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
def train(model: Module, train_set, val_set, cfg: TrainConfig,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Seeded Adam training; keeps the checkpoint with the best validation macro F1 (ties: earlier epoch)."""
    labels = dataset_labels(train_set)
    if not labels:
        raise ValueError("training set is empty")
    if len(set(labels)) < 2:
        raise ValueError(f"training set contains only class {labels[0]}; both classes are required")
    if len(val_set) == 0:
        raise ValueError("validation set is empty")
    depth_to = cfg.resolved_eval_depth

    init_report = None
    if cfg.init_ckpt is not None:
        ckpt = cfg.init_ckpt if isinstance(cfg.init_ckpt, Checkpoint) else load_checkpoint(cfg.init_ckpt)
        init_report = transfer_init(model, ckpt, seed=cfg.seed)

    history = History()
    if cfg.epochs == 0:
        report = evaluate(model, val_set, depth_to)
        best = Checkpoint.from_model(model, epoch=0, val_macro_f1=report.macro_f1, seed=cfg.seed)
        return TrainResult(best, history, 0, report, init_report)

    opt = Adam(model.parameters(), cfg.hyper)
    best, best_epoch, best_report = None, 0, None
    steps = 0
    n = len(labels)
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        batches = _batches(order, cfg.batch_size)
        opt.zero_grad()
        pending, loss_sum = 0, 0.0
        for b, idx in enumerate(batches):
            vols = [apply_augmentations(train_set[int(i)][0], cfg.augment, sample_seed(cfg.seed, epoch, int(i)))
                    for i in idx]
            x = _stack(vols)
            check_model_input(model, x.shape[1:])
            loss = ops.cross_entropy(model(Tensor(x)), [labels[int(i)] for i in idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b + 1} "
                                    f"(sample indices {idx.tolist()}); lower the learning rate or check inputs")
            (loss * (1.0 / cfg.grad_accum_steps) if cfg.grad_accum_steps > 1 else loss).backward()
            history.step_losses.append(value)
            loss_sum += value * len(idx)
            pending += 1
            if pending == cfg.grad_accum_steps or b == len(batches) - 1:
                opt.step()
                opt.zero_grad()
                pending = 0
                steps += 1
        report = evaluate(model, val_set, depth_to)
        record = EpochRecord(epoch, loss_sum / n, report.macro_f1, time.perf_counter() - start)
        history.rows.append(record)
        if best is None or report.macro_f1 > best_report.macro_f1:
            best = Checkpoint.from_model(model, epoch=epoch, val_macro_f1=report.macro_f1, seed=cfg.seed)
            best_epoch, best_report = epoch, report
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(best, history, best_epoch, best_report, init_report, steps)
