"""Adam training with a reduce-on-plateau learning rate and best-val checkpointing."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .cohort import CohortManifest, CohortRecord, Label, Split, SplitAssignment
from .evaluation import PredictionRecord
from .imaging import AugmentationPolicy, RngStream, apply_policy, load_and_normalize
from .models import Model, _atomic_write, checkpoint_bytes, save_checkpoint

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
IMPROVEMENT_TOLERANCE = 1e-6


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    plateau_patience: int = 5
    lr_factor: float = 0.1
    max_epochs: int = 50
    batch_size: int = 32
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError(f"lr_factor must lie in (0, 1), got {self.lr_factor}")
        if self.plateau_patience < 1:
            raise ValueError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if not (self.initial_lr > 0 and math.isfinite(self.initial_lr)):
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")


def derive_seeds(seed: int) -> tuple[int, int, int]:
    """(init, data order, augmentation) seeds, all derived from one integer."""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(c.generate_state(1, dtype=np.uint32)[0]) for c in children)


# -- scheduler -------------------------------------------------------------------

@dataclass(frozen=True)
class SchedulerState:
    initial_lr: float = 1e-3
    best_monitor_value: float = math.inf
    epochs_since_improvement: int = 0
    reductions: int = 0
    patience: int = 5
    factor: float = 0.1

    @property
    def current_lr(self) -> float:
        # divide by 1/factor: for the default factor this is literally "divide by ten", exact in decimal
        return self.initial_lr / (1.0 / self.factor) ** self.reductions

    @classmethod
    def from_config(cls, config: TrainConfig) -> "SchedulerState":
        return cls(initial_lr=config.initial_lr, patience=config.plateau_patience, factor=config.lr_factor)

    def to_dict(self) -> dict:
        return {"initial_lr": self.initial_lr, "best_monitor_value": self.best_monitor_value,
                "epochs_since_improvement": self.epochs_since_improvement,
                "reductions": self.reductions, "patience": self.patience, "factor": self.factor}


def lr_schedule_step(state: SchedulerState, epoch_monitor_value: float) -> SchedulerState:
    """Advance the plateau counter by one epoch of validation loss.

    An improvement is a value below the best by more than 1e-6.  After
    ``patience`` epochs without one the rate is multiplied by ``factor``
    and the counter restarts.
    """
    value = float(epoch_monitor_value)
    if not math.isfinite(value):
        raise ValueError(f"monitor value must be finite, got {epoch_monitor_value}")
    if value < state.best_monitor_value - IMPROVEMENT_TOLERANCE:
        return replace(state, best_monitor_value=value, epochs_since_improvement=0)
    waited = state.epochs_since_improvement + 1
    if waited >= state.patience:
        return replace(state, epochs_since_improvement=0, reductions=state.reductions + 1)
    return replace(state, epochs_since_improvement=waited)


# -- data ----------------------------------------------------------------------------

class ImageSource:
    """Loads and caches normalized images for manifest records."""

    def __init__(self, image_root=None, input_size=(224, 224), channels: int = 3):
        self.image_root = Path(image_root) if image_root is not None else None
        self.input_size = tuple(input_size)
        self.channels = channels
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def for_model(cls, model: Model, image_root=None) -> "ImageSource":
        c, h, w = model.input_shape
        return cls(image_root, (h, w), c)

    def path(self, record: CohortRecord) -> Path:
        ref = Path(record.image_ref)
        if self.image_root is not None and not ref.is_absolute():
            ref = self.image_root / ref
        return ref

    def get(self, record: CohortRecord) -> np.ndarray:
        img = self._cache.get(record.study_id)
        if img is None:
            img = load_and_normalize(self.path(record), self.input_size, self.channels)
            self._cache[record.study_id] = img
        return img


def _to_tensor(images: Sequence[np.ndarray], dtype) -> torch.Tensor:
    arr = np.stack(images).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def _targets(records: Sequence[CohortRecord], dtype=torch.float64) -> torch.Tensor:
    return torch.tensor([1.0 if r.label is Label.REDUCED else 0.0 for r in records], dtype=dtype)


def evaluate_epoch(model: torch.nn.Module, records: Sequence[CohortRecord], batch_size: int,
                   source: ImageSource) -> tuple[float, float, list[PredictionRecord]]:
    """Mean BCE, accuracy and per-study predictions, without augmentation."""
    records = list(records)
    if not records:
        raise ValueError("cannot evaluate an empty subset")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    total_loss = 0.0
    preds: list[PredictionRecord] = []
    try:
        with torch.no_grad():
            for start in range(0, len(records), batch_size):
                batch = records[start:start + batch_size]
                x = _to_tensor([source.get(r) for r in batch], dtype)
                logits = model(x).reshape(-1).double()
                y = _targets(batch)
                total_loss += float(F.binary_cross_entropy_with_logits(logits, y, reduction="sum"))
                probs = torch.sigmoid(logits).tolist()
                preds.extend(PredictionRecord(r.study_id, p, r.label) for r, p in zip(batch, probs))
    finally:
        model.train(was_training)
    accuracy = sum(p.correct for p in preds) / len(preds)
    return total_loss / len(records), accuracy, preds


# -- history ----------------------------------------------------------------------

class EpochRecord(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EpochRecord._fields)
        for e in self.epochs:
            writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.val_acc), repr(e.lr)])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")

    @classmethod
    def read(cls, path) -> "TrainHistory":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                                float(r["val_acc"]), float(r["lr"])) for r in rows])


class TrainResult(NamedTuple):
    model: Model
    history: TrainHistory
    best_checkpoint: Path | bytes | None
    best_epoch: int | None


# -- training loop ----------------------------------------------------------------------

def train(model: Model, manifest: CohortManifest, split: SplitAssignment, config: TrainConfig, *,
          image_root=None, out_dir=None, source: ImageSource | None = None) -> TrainResult:
    """Train ``model`` in place on the train split, monitoring validation loss.

    With ``out_dir`` the best and final states go to ``best.ckpt`` /
    ``last.ckpt`` there and the best path is returned; otherwise the best
    checkpoint is returned as bytes.  Everything random derives from
    ``config.seed``; the model's own initialisation is the caller's (see
    :func:`derive_seeds`).
    """
    train_recs = [r for r in manifest.records if split.assignment.get(r.study_id) is Split.TRAIN]
    val_recs = [r for r in manifest.records if split.assignment.get(r.study_id) is Split.VAL]
    if not train_recs:
        raise ValueError("train split is empty")
    if not val_recs:
        raise ValueError("validation split is empty")

    source = source or ImageSource.for_model(model, image_root)
    out_dir = Path(out_dir) if out_dir is not None else None
    _, order_seed, aug_seed = derive_seeds(config.seed)
    order_rng = RngStream(order_seed)
    policy = config.augmentation
    dtype = model.dtype

    history = TrainHistory()
    if config.max_epochs == 0:
        return TrainResult(model, history, None, None)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.initial_lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    sched = SchedulerState.from_config(config)
    best_loss, best_epoch, best_blob = math.inf, None, None
    t0 = time.perf_counter()

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(order_seed)  # dropout masks
        for epoch in range(1, config.max_epochs + 1):
            lr = sched.current_lr
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            order = order_rng.permutation(len(train_recs))
            loss_sum = 0.0
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                batch = [train_recs[i] for i in order[start:start + config.batch_size]]
                images = []
                for rec in batch:
                    img = source.get(rec)
                    if policy.active:
                        img = apply_policy(img, policy, RngStream.for_sample(aug_seed, rec.study_id, epoch))
                    images.append(img)
                x = _to_tensor(images, dtype)
                y = _targets(batch, dtype)
                optimizer.zero_grad(set_to_none=True)
                loss = F.binary_cross_entropy_with_logits(model(x), y)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(epoch, b, loss.item())
                loss.backward()
                optimizer.step()
                loss_sum += loss.item() * len(batch)
            train_loss = loss_sum / len(train_recs)

            val_loss, val_acc, _ = evaluate_epoch(model, val_recs, config.batch_size, source)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(epoch, -1, val_loss)
            history.epochs.append(EpochRecord(epoch, train_loss, val_loss, val_acc, lr))
            logger.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f lr=%g",
                        epoch, train_loss, val_loss, val_acc, lr)
            sched = lr_schedule_step(sched, val_loss)

            state = {"epoch": epoch, "val_loss": val_loss, "scheduler": sched.to_dict(),
                     "optimizer": optimizer.state_dict(), "config_seed": config.seed}
            if val_loss < best_loss:
                best_loss, best_epoch = val_loss, epoch
                best_blob = checkpoint_bytes(model, state)
                if out_dir is not None:
                    _atomic_write(out_dir / "best.ckpt", best_blob)

    history.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        save_checkpoint(out_dir / "last.ckpt", model, state)
        return TrainResult(model, history, out_dir / "best.ckpt", best_epoch)
    return TrainResult(model, history, best_blob, best_epoch)
