"""Training data loading: the query/passage JSONL schema, grouped by question.

Each line carries {question, passage, label, file_id, file_name} plus
answer/answer_source on positives. A question group is one query with its
full candidate list; the train/validation split operates on whole groups,
never on individual pairs, so no question leaks across the split.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from typing import Dict, List, Tuple

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuestionGroup:
    question: str
    passages: Tuple[str, ...]
    labels: Tuple[int, ...]

    @property
    def positive_count(self) -> int:
        return sum(self.labels)


def load_groups(path) -> Tuple[List[QuestionGroup], int]:
    """Parse JSONL into question groups, in first-seen question order.

    Groups without any positive cannot contribute a listwise target; they
    are skipped with a warning and counted in the second return value.
    """
    order: List[str] = []
    passages: Dict[str, List[str]] = {}
    labels: Dict[str, List[int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            question = row["question"]
            if question not in passages:
                order.append(question)
                passages[question] = []
                labels[question] = []
            passages[question].append(row["passage"])
            labels[question].append(int(row["label"]))
    groups: List[QuestionGroup] = []
    skipped = 0
    for question in order:
        group = QuestionGroup(
            question=question,
            passages=tuple(passages[question]),
            labels=tuple(labels[question]),
        )
        if group.positive_count == 0:
            logger.warning("skipping group without positives: %r", question)
            skipped += 1
            continue
        groups.append(group)
    if skipped:
        logger.warning("skipped %d group(s) without positives", skipped)
    return groups, skipped


def split_groups(
    groups: List[QuestionGroup], validation_fraction: float = 0.1, seed: int = 0
) -> Tuple[List[QuestionGroup], List[QuestionGroup]]:
    """Seeded 90/10 split on whole question groups."""
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError("validation_fraction must lie in (0, 1)")
    indices = list(range(len(groups)))
    random.Random(seed).shuffle(indices)
    n_val = max(1, round(validation_fraction * len(groups))) if len(groups) > 1 else 0
    val_idx = set(indices[:n_val])
    train = [g for i, g in enumerate(groups) if i not in val_idx]
    val = [g for i, g in enumerate(groups) if i in val_idx]
    return train, val
