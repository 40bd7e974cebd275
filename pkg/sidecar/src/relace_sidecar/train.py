"""Fine-tuning loop: one question group per batch, listwise loss, best-checkpoint selection.

The optimizer is AdamW with a linear warmup-decay schedule. Validation runs
after every epoch; the kept checkpoint is the one winning lexicographically
on (top-1 accuracy, lower validation loss) — the combination is an artifact
choice, documented rather than tuned. A metrics log with per-epoch numbers
lands next to the checkpoint.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
from transformers import get_linear_schedule_with_warmup

from .data import QuestionGroup, load_groups, split_groups
from .listwise import listwise_loss
from .model import DEFAULT_BASE_CHECKPOINT, CrossEncoder

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainRunConfig:
    base_checkpoint: str = DEFAULT_BASE_CHECKPOINT
    epochs: int = 3
    validation_fraction: float = 0.1
    max_tokens: int = 512
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    micro_batch: int = 16
    seed: int = 0


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_top1: float
    val_loss: float


@dataclass
class TrainResult:
    checkpoint_dir: Path
    best_epoch: int
    epochs: List[EpochMetrics]
    skipped_groups: int

    @property
    def best(self) -> EpochMetrics:
        return next(m for m in self.epochs if m.epoch == self.best_epoch)


def _evaluate(encoder: CrossEncoder, groups: List[QuestionGroup]) -> Tuple[float, float]:
    """Validation top-1 accuracy and mean listwise loss."""
    if not groups:
        return 0.0, float("inf")
    encoder.model.eval()
    hits = 0
    total_loss = 0.0
    with torch.no_grad():
        for group in groups:
            scores = encoder.logits(group.question, group.passages)
            labels = torch.tensor(group.labels)
            if group.labels[int(torch.argmax(scores))] == 1:
                hits += 1
            total_loss += float(listwise_loss(scores, labels))
    return hits / len(groups), total_loss / len(groups)


def _group_logits(encoder: CrossEncoder, group: QuestionGroup, micro_batch: int) -> torch.Tensor:
    """Forward the whole candidate list, micro-batched for large groups."""
    if len(group.passages) <= micro_batch:
        return encoder.logits(group.question, group.passages)
    parts = [
        encoder.logits(group.question, group.passages[i : i + micro_batch])
        for i in range(0, len(group.passages), micro_batch)
    ]
    return torch.cat(parts)


def train(
    train_jsonl,
    config: TrainRunConfig,
    output_dir,
    encoder: Optional[CrossEncoder] = None,
) -> TrainResult:
    """Fine-tune on the JSONL dataset and save the best checkpoint.

    Groups without a positive are skipped with a warning (their count is
    reported in the result), since they carry no listwise target.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    random.seed(config.seed)

    groups, skipped = load_groups(train_jsonl)
    if not groups:
        raise ValueError("no usable question groups in the training file")
    train_groups, val_groups = split_groups(
        groups, config.validation_fraction, seed=config.seed
    )
    logger.info(
        "training on %d groups, validating on %d (skipped %d without positives)",
        len(train_groups), len(val_groups), skipped,
    )

    if encoder is None:
        encoder = CrossEncoder(config.base_checkpoint, max_tokens=config.max_tokens)
    optimizer = torch.optim.AdamW(
        encoder.model.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    total_steps = max(1, config.epochs * len(train_groups))
    scheduler = get_linear_schedule_with_warmup(
        optimizer,
        num_warmup_steps=int(config.warmup_fraction * total_steps),
        num_training_steps=total_steps,
    )

    order = list(range(len(train_groups)))
    shuffler = random.Random(config.seed)
    history: List[EpochMetrics] = []
    best: Optional[EpochMetrics] = None
    best_dir = output_dir / "checkpoint"
    for epoch in range(1, config.epochs + 1):
        encoder.model.train()
        shuffler.shuffle(order)
        running = 0.0
        for idx in order:
            group = train_groups[idx]
            optimizer.zero_grad()
            scores = _group_logits(encoder, group, config.micro_batch)
            loss = listwise_loss(scores, torch.tensor(group.labels))
            loss.backward()
            optimizer.step()
            scheduler.step()
            running += float(loss.detach())
        val_top1, val_loss = _evaluate(encoder, val_groups)
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=running / max(1, len(train_groups)),
            val_top1=val_top1,
            val_loss=val_loss,
        )
        history.append(metrics)
        logger.info(
            "epoch %d: train_loss=%.4f val_top1=%.4f val_loss=%.4f",
            epoch, metrics.train_loss, metrics.val_top1, metrics.val_loss,
        )
        if best is None or (metrics.val_top1, -metrics.val_loss) > (best.val_top1, -best.val_loss):
            best = metrics
            encoder.save(best_dir)

    log = {
        "base_checkpoint": config.base_checkpoint,
        "epochs": [m.__dict__ for m in history],
        "best_epoch": best.epoch,
        "skipped_groups": skipped,
        "train_groups": len(train_groups),
        "validation_groups": len(val_groups),
    }
    (output_dir / "training_log.json").write_text(
        json.dumps(log, indent=2), encoding="utf-8"
    )
    return TrainResult(
        checkpoint_dir=best_dir,
        best_epoch=best.epoch,
        epochs=history,
        skipped_groups=skipped,
    )
