import os
import sys
from functools import lru_cache

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from decision_layer.bm25 import build_bm25_index
from decision_layer.graph_env import generate_graph
from decision_layer.retrieval_env import synthesize_corpus


@lru_cache(maxsize=None)
def cached_graph(n: int = 200, seed: int = 0):
    return generate_graph(n=n, seed=seed)


@lru_cache(maxsize=None)
def cached_corpus(counts=(50, 50, 50), seed: int = 0):
    return synthesize_corpus(counts, seed=seed)


@pytest.fixture(scope="session")
def graph():
    return cached_graph()


@pytest.fixture(scope="session")
def corpus():
    return cached_corpus()


@pytest.fixture(scope="session")
def corpus_index(corpus):
    return build_bm25_index(corpus.passages)


@pytest.fixture(autouse=True)
def _no_output_dir_override(monkeypatch):
    monkeypatch.delenv("DECISION_LAYER_OUTPUT_DIR", raising=False)
