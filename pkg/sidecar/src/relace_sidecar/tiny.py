"""Build a tiny offline base checkpoint for tests and demos.

The production base is a public reranker checkpoint pulled from a model
hub; inside offline environments tests need a real-but-small cross-encoder
that loads through the same AutoModel path. This builds a 2-layer BERT with
a whole-word vocabulary over the caller's word list and saves it in the
standard checkpoint layout.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

from transformers import BertConfig, BertForSequenceClassification, BertTokenizer

SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


def build_tiny_checkpoint(
    path,
    vocab_words: Iterable[str],
    hidden_size: int = 64,
    num_layers: int = 2,
    num_heads: int = 4,
    max_position: int = 160,
    seed: int = 0,
) -> str:
    """Create and save a small randomly initialized cross-encoder."""
    import torch

    torch.manual_seed(seed)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    words = sorted({w.lower() for w in vocab_words if w.strip()})
    vocab_map = {token: i for i, token in enumerate(SPECIAL_TOKENS + words)}
    tokenizer = BertTokenizer(vocab=vocab_map, do_lower_case=True)
    config = BertConfig(
        vocab_size=len(vocab_map),
        hidden_size=hidden_size,
        num_hidden_layers=num_layers,
        num_attention_heads=num_heads,
        intermediate_size=hidden_size * 4,
        max_position_embeddings=max_position,
        num_labels=1,
    )
    model = BertForSequenceClassification(config)
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)
