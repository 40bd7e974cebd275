import json
import os
import random
import sys
from pathlib import Path

os.environ.setdefault("HF_HUB_DISABLE_PROGRESS_BARS", "1")
os.environ.setdefault("HF_HUB_OFFLINE", "1")

import pytest
import transformers

transformers.logging.set_verbosity_error()

TESTS_DIR = Path(__file__).parent
SIDECAR_ROOT = TESTS_DIR.parent
REPO_ROOT = SIDECAR_ROOT.parent
FIXTURES_DIR = REPO_ROOT / "fixtures"

if str(TESTS_DIR) not in sys.path:
    sys.path.insert(0, str(TESTS_DIR))


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES_DIR


def build_separable_dataset(n_questions=200, negatives=4, seed=7):
    """Separable by construction: each positive contains its query verbatim,
    negatives are drawn from a disjoint distractor vocabulary."""
    rng = random.Random(seed)
    markers = [f"topic{i:03d}" for i in range(n_questions)]
    distractors = [f"noise{i:02d}" for i in range(40)]
    vocab = set(markers) | set(distractors) | {"what", "does", "require", "guidance", "applies"}
    rows = []
    for i, marker in enumerate(markers):
        question = f"what does {marker} require"
        positive = f"what does {marker} require guidance applies"
        entries = [(positive, 1)]
        for _ in range(negatives):
            entries.append((" ".join(rng.sample(distractors, 6)), 0))
        rng.shuffle(entries)
        for passage, label in entries:
            row = {
                "question": question,
                "passage": passage,
                "label": label,
                "file_id": f"f{i}",
                "file_name": f"f{i}.txt",
            }
            if label == 1:
                row["answer"] = passage
                row["answer_source"] = passage
            rows.append(row)
    return rows, vocab


def write_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


@pytest.fixture(scope="session")
def separable_run(tmp_path_factory):
    """One shared fine-tuning run on the separable set (used by several tests)."""
    from relace_sidecar.tiny import build_tiny_checkpoint
    from relace_sidecar.train import TrainRunConfig, train

    root = tmp_path_factory.mktemp("separable")
    rows, vocab = build_separable_dataset()
    train_file = root / "train.jsonl"
    write_jsonl(rows, train_file)
    base = build_tiny_checkpoint(root / "base", vocab)
    config = TrainRunConfig(
        base_checkpoint=base,
        epochs=3,
        max_tokens=48,
        learning_rate=2e-3,
        warmup_fraction=0.05,
        seed=0,
    )
    result = train(train_file, config, root / "run")
    return {
        "rows": rows,
        "train_file": train_file,
        "base": base,
        "config": config,
        "result": result,
    }
