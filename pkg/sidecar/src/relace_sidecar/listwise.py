"""Listwise objective in torch: softmax cross-entropy against spread labels."""

from __future__ import annotations

import torch


def listwise_loss(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """-sum(y_i * log P_i) with P = softmax(scores), y = labels / sum(labels).

    ``scores`` is a 1-d tensor over one question's candidate list. Lists
    without a positive have no target distribution and are rejected.
    """
    if scores.dim() != 1 or labels.dim() != 1 or scores.shape != labels.shape:
        raise ValueError("scores and labels must be 1-d tensors of equal length")
    total = labels.sum()
    if total.item() <= 0:
        raise ValueError("candidate list has no positive label")
    target = labels.to(scores.dtype) / total.to(scores.dtype)
    log_probs = torch.log_softmax(scores, dim=0)
    return -(target * log_probs).sum()
