import json
import shutil
from importlib import resources
from pathlib import Path

import pytest

from metricforge.data import save_segments
from metricforge.toydata import toy_corpus

FAST = {
    "tokenizer": {"vocab_size": 512},
    "encoder": {"hidden_size": 8, "max_tokens_nosrc": 48, "max_tokens_src": 64, "dropout": 0.1},
    "pretrain": {"max_lr": 0.002, "total_steps": 40, "warmup_steps": 4, "batch_size": 8},
    "finetune": {"max_lr": 0.001, "total_steps": 20, "warmup_steps": 2, "batch_size": 8},
}


def bundled(name: str) -> Path:
    return Path(str(resources.files("metricforge") / "data" / name))


@pytest.fixture
def corpus(tmp_path) -> Path:
    path = tmp_path / "corpus.jsonl"
    save_segments(toy_corpus(n_sources=16, n_systems=4, seed=1), path)
    return path


@pytest.fixture
def fast_config(tmp_path, corpus) -> Path:
    doc = json.loads(bundled("example_config.json").read_text())
    doc.update(FAST)
    doc["paths"] = {"corpus": corpus.name, "workdir": "run"}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def copy_bundled(dest: Path) -> Path:
    for name in ("example_config.json", "toy_corpus.jsonl"):
        shutil.copy(bundled(name), dest / name)
    return dest / "example_config.json"
