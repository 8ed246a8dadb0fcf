import sys

import numpy as np
import pytest

from storerec import numeric as nm
from storerec.backbone import Backbone, BackboneConfig
from storerec.textcodec import build_vocab, register_specials
from storerec.tokenizer import ItemRecord, task_names_for

TEXTS = [
    ("red fox jumps", "a quick red fox jumps over lazy dogs", "animals"),
    ("blue sky rain", "clouds gather and rain falls on the town", "weather"),
    ("stock prices fall", "markets react to rate news today", "finance"),
    ("new fox film", "the film about a fox wins prizes", "cinema"),
]


@pytest.fixture
def items():
    return [ItemRecord(f"i{j}", [("title", t), ("abstract", a), ("category", c)], 2) for j, (t, a, c) in enumerate(TEXTS)]


@pytest.fixture
def vocab(items):
    v = build_vocab(text for it in items for _, text in it.attributes)
    register_specials(v, 2, task_names_for(["title", "abstract", "category"], 2) + ["rec", "align", "score"], 4)
    return v


@pytest.fixture
def tiny_model(vocab):
    return Backbone(BackboneConfig(vocab_size=len(vocab), layers=2, model_dim=16, heads=4, ffn_dim=32,
                                   max_seq_len=64), seed=1)


@pytest.fixture(autouse=True)
def fresh_tape():
    nm.reset_tape()
    yield
    nm.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None) or \
        getattr(sys.modules.get("tests.test_acceptance"), "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
