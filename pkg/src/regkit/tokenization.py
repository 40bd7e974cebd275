"""Whitespace token counting.

All budgets in the chunking pipeline are measured in whitespace-delimited
tokens. The measure is deliberately simple: it is deterministic, cheap, and
language-agnostic enough for mixed English/Chinese regulatory text at desk
scale. Callers that need a different measure pass their own tokenizer
callable wherever a config accepts one.
"""

from typing import Callable, List

Tokenizer = Callable[[str], List[str]]


def tokenize(text: str) -> List[str]:
    """Split on runs of whitespace; never returns empty tokens."""
    return text.split()


def token_count(text: str, tokenizer: Tokenizer = tokenize) -> int:
    return len(tokenizer(text))
