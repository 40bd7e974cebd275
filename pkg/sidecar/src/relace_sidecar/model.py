"""Cross-encoder wrapper: joint query/passage scoring via a sequence classifier.

Any HuggingFace checkpoint with a single-logit sequence-classification head
works as the base; the production default is the public bge-reranker-base
checkpoint, while tests use a tiny locally built BERT so everything runs
offline. Query and passage are tokenized jointly with truncation and
padding up to ``max_tokens``.
"""

from __future__ import annotations

from typing import List, Sequence

import torch
from transformers import AutoModelForSequenceClassification, AutoTokenizer

DEFAULT_BASE_CHECKPOINT = "BAAI/bge-reranker-base"


class CrossEncoder:
    def __init__(self, checkpoint: str, max_tokens: int = 512, device: str = "cpu"):
        self.checkpoint = checkpoint
        self.max_tokens = max_tokens
        self.device = torch.device(device)
        self.tokenizer = AutoTokenizer.from_pretrained(checkpoint)
        self.model = AutoModelForSequenceClassification.from_pretrained(checkpoint)
        self.model.to(self.device)

    def logits(self, query: str, passages: Sequence[str]) -> torch.Tensor:
        """One scalar per passage, with gradients when in training mode."""
        encoded = self.tokenizer(
            [query] * len(passages),
            list(passages),
            truncation=True,
            padding=True,
            max_length=self.max_tokens,
            return_tensors="pt",
        ).to(self.device)
        output = self.model(**encoded)
        return output.logits.squeeze(-1)

    def score(self, query: str, passages: Sequence[str]) -> List[float]:
        """Deterministic inference scores (eval mode, no grad)."""
        self.model.eval()
        with torch.no_grad():
            return [float(v) for v in self.logits(query, passages)]

    def save(self, path) -> None:
        self.model.save_pretrained(path)
        self.tokenizer.save_pretrained(path)
