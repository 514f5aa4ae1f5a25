"""Epoch orchestration: seeded shuffling, augmentation, optimization, evaluation."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .augment import AugmentationConfig, augment_pair, sample_rng
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import ChangePairDataset, SamplePair
from .errors import UsageError, ValidationError
from .metrics import ConfusionCounts, MetricsReport, confusion, derive_metrics, threshold
from .model import TinyCDModel
from .ops import LOSSES
from .optim import AdamW, cosine_lr
from .tensor import Tensor, no_grad


def stack_batch(samples: list[SamplePair], dtype) -> tuple[Tensor, Tensor, Tensor]:
    """Stack sample pairs into batch tensors, naming the offending sample on mismatch."""
    shape = samples[0].reference.shape
    for s in samples:
        s.validate()
        if s.reference.shape != shape:
            raise ValidationError(
                f"sample {s.id!r} has shape {s.reference.shape}, expected {shape} like the rest of the batch"
            )
    i1 = np.stack([s.reference for s in samples]).astype(dtype, copy=False)
    i2 = np.stack([s.comparison for s in samples]).astype(dtype, copy=False)
    y = np.stack([s.label for s in samples]).astype(dtype, copy=False)
    return Tensor(i1), Tensor(i2), Tensor(y)


def train_epoch(
    model: TinyCDModel,
    dataset: ChangePairDataset,
    optimizer: AdamW,
    loss_kind: str = "bce",
    batch_size: int = 8,
    rng: Optional[np.random.Generator] = None,
    augmentation: Optional[AugmentationConfig] = None,
    epoch: int = 0,
) -> tuple[float, ConfusionCounts]:
    """One pass over the shuffled dataset; returns mean loss and train confusion counts."""
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    if loss_kind not in LOSSES:
        raise UsageError(f"unknown loss {loss_kind!r}; expected one of {sorted(LOSSES)}")
    rng = rng or np.random.default_rng(0)
    order = rng.permutation(len(dataset))
    loss_fn = LOSSES[loss_kind]

    total_loss = 0.0
    counts = ConfusionCounts()
    for start in range(0, len(order), batch_size):
        batch_ids = order[start : start + batch_size]
        samples = []
        for i in batch_ids:
            s = dataset[int(i)]
            if augmentation is not None:
                s = augment_pair(s, augmentation, sample_rng(augmentation.seed, epoch, int(i)))
            samples.append(s)
        x1, x2, y = stack_batch(samples, model.dtype)
        pred = model.forward(x1, x2)
        loss = loss_fn(pred, y)
        loss.backward()
        optimizer.step()
        optimizer.zero_grad()
        total_loss += loss.item() * len(samples)
        counts = counts + confusion(threshold(pred.data), y.data)
    return total_loss / len(order), counts


def evaluate(
    model: TinyCDModel,
    dataset: ChangePairDataset,
    decision_threshold: float = 0.5,
    batch_size: int = 8,
) -> MetricsReport:
    """Integer confusion counts over every pixel of every sample, no gradients."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate an empty dataset")
    counts = ConfusionCounts()
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            samples = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
            x1, x2, y = stack_batch(samples, model.dtype)
            pred = model.forward(x1, x2)
            counts = counts + confusion(threshold(pred.data, decision_threshold), y.data)
    return derive_metrics(counts)


def fit(
    model: TinyCDModel,
    optimizer: AdamW,
    train_ds: ChangePairDataset,
    val_ds: ChangePairDataset,
    cfg: RunConfig,
    out_dir,
    log: Callable[[str], None] = print,
    augment: bool = True,
) -> dict:
    """Full training run: cosine schedule, per-epoch progress records, last/best checkpoints.

    Emits one JSON record per epoch to <out_dir>/train_log.jsonl and a matching
    human-readable line through ``log``.  Returns the history plus best/last F1.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    history: list[dict] = []
    best = {"f1": -1.0, "epoch": -1}

    with open(log_path, "w") as log_file:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.schedule)
            optimizer.lr = lr
            mean_loss, _ = train_epoch(
                model,
                train_ds,
                optimizer,
                loss_kind=cfg.loss,
                batch_size=cfg.batch_size,
                rng=np.random.default_rng(cfg.seed + epoch),
                augmentation=cfg.augmentation if augment else None,
                epoch=epoch,
            )
            val = evaluate(model, val_ds, batch_size=cfg.batch_size)
            record = {"epoch": epoch, "lr": lr, "train_loss": mean_loss, "val_f1": val.f1}
            history.append(record)
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
            log(f"epoch {epoch:3d}  lr {lr:.5f}  train_loss {mean_loss:.4f}  val_f1 {val.f1:.4f}")
            save_checkpoint(model, optimizer, out_dir / "last.ckpt", meta=record)
            if val.f1 > best["f1"]:
                best = {"f1": val.f1, "epoch": epoch}
                save_checkpoint(model, optimizer, out_dir / "best.ckpt", meta=record)

    if cfg.epochs == 0:
        val = evaluate(model, val_ds, batch_size=cfg.batch_size)
        record = {"epoch": -1, "lr": 0.0, "train_loss": float("nan"), "val_f1": val.f1}
        save_checkpoint(model, optimizer, out_dir / "last.ckpt", meta=record)
        save_checkpoint(model, optimizer, out_dir / "best.ckpt", meta=record)
        best = {"f1": val.f1, "epoch": -1}

    final_val = evaluate(model, val_ds, batch_size=cfg.batch_size)
    return {"history": history, "best": best, "final_val": final_val}
