import json
from collections import Counter

import pytest

from conftest import build_separable_dataset, write_jsonl
from relace_sidecar.data import load_groups, split_groups
from relace_sidecar.model import CrossEncoder


def lexical_top1(groups) -> float:
    """Baseline: rank by token-multiset overlap with the query."""

    def overlap(query, passage):
        q = Counter(query.lower().split())
        p = Counter(passage.lower().split())
        return sum((q & p).values()) / max(1, sum(q.values()))

    hits = 0
    for group in groups:
        scores = [overlap(group.question, passage) for passage in group.passages]
        best = max(range(len(scores)), key=lambda i: (scores[i], -i))
        if group.labels[best] == 1:
            hits += 1
    return hits / len(groups)


def test_validation_top1_reaches_one_within_three_epochs(separable_run):
    result = separable_run["result"]
    assert result.best.val_top1 == 1.0
    assert result.best_epoch <= 3
    assert result.skipped_groups == 0


def test_fine_tuned_beats_or_matches_lexical_baseline(separable_run):
    result = separable_run["result"]
    config = separable_run["config"]
    groups, _ = load_groups(separable_run["train_file"])
    _, val_groups = split_groups(groups, config.validation_fraction, seed=config.seed)
    baseline = lexical_top1(val_groups)
    encoder = CrossEncoder(str(result.checkpoint_dir), max_tokens=config.max_tokens)
    hits = 0
    for group in val_groups:
        scores = encoder.score(group.question, group.passages)
        best = max(range(len(scores)), key=lambda i: (scores[i], -i))
        if group.labels[best] == 1:
            hits += 1
    fine_tuned = hits / len(val_groups)
    assert fine_tuned == 1.0
    assert fine_tuned >= baseline


def test_split_counts_ninety_ten(separable_run):
    log = json.loads(
        (separable_run["train_file"].parent / "run" / "training_log.json").read_text()
    )
    assert log["train_groups"] == 180
    assert log["validation_groups"] == 20
    assert log["skipped_groups"] == 0
    assert len(log["epochs"]) == 3


def test_checkpoint_layout(separable_run):
    checkpoint = separable_run["result"].checkpoint_dir
    names = {p.name for p in checkpoint.iterdir()}
    assert "config.json" in names
    assert any(n.startswith("model") or n.endswith(".safetensors") for n in names)
    assert "tokenizer.json" in names or "vocab.txt" in names


def test_group_without_positive_skipped_in_training(tmp_path):
    from relace_sidecar.tiny import build_tiny_checkpoint
    from relace_sidecar.train import TrainRunConfig, train

    rows, vocab = build_separable_dataset(n_questions=12, negatives=2)
    rows.append(
        {"question": "orphan question", "passage": "noise00 noise01", "label": 0,
         "file_id": "x", "file_name": "x"}
    )
    train_file = tmp_path / "train.jsonl"
    write_jsonl(rows, train_file)
    base = build_tiny_checkpoint(tmp_path / "base", vocab)
    config = TrainRunConfig(
        base_checkpoint=base, epochs=1, max_tokens=48, learning_rate=1e-3, seed=0
    )
    result = train(train_file, config, tmp_path / "run")
    assert result.skipped_groups == 1
