import math

import pytest

from decision_layer.bm25 import BM25Index, build_bm25_index, tokenize
from decision_layer.errors import ConfigurationError, DataError


def test_tokenize_lowercases_alphanumeric_runs():
    assert tokenize("What is the Alpha-42 plan?") == ["what", "is", "the", "alpha", "42", "plan"]


def test_hand_computed_scores():
    # lengths 2, 1, 6 -> avgdl 3; "apple" appears in two of three passages
    index = BM25Index(["p1", "p2", "p3"], ["apple pie", "apple", "one two three four five six"])
    idf = math.log(1.6)
    scores = index.scores("apple")
    assert scores[0] == pytest.approx(idf * 2.2 / 1.9)
    assert scores[1] == pytest.approx(idf * 1.375)
    assert scores[2] == 0.0
    assert [pid for pid, _ in index.rank("apple")] == ["p2", "p1", "p3"]
    assert index.rank_of("apple", "p1") == 2


def test_ties_break_by_passage_id():
    index = BM25Index(["b", "a", "c"], ["same words", "same words", "other"])
    assert [pid for pid, _ in index.rank("same")] == ["a", "b", "c"]
    assert len(index.rank("same", top_k=2)) == 2


def test_unknown_terms_score_zero():
    index = BM25Index(["p1"], ["apple"])
    assert index.scores("banana").tolist() == [0.0]


def test_empty_corpus_rejected():
    with pytest.raises(ConfigurationError):
        BM25Index([], [])


def test_duplicate_ids_rejected():
    with pytest.raises(DataError):
        BM25Index(["p1", "p1"], ["a", "b"])


def test_rank_of_unknown_passage():
    with pytest.raises(DataError):
        BM25Index(["p1"], ["apple"]).rank_of("apple", "p9")


def test_rebuilt_index_ranks_identically(corpus):
    first = build_bm25_index(corpus.passages)
    second = build_bm25_index(list(corpus.passages))
    for question in corpus.questions[::10]:
        assert first.rank(question.question) == second.rank(question.question)
        assert first.scores(question.question).tolist() == second.scores(question.question).tolist()


def test_passage_order_does_not_change_ranking():
    ids = ["p1", "p2", "p3", "p4"]
    texts = ["red apple pie", "green apple", "apple apple tart", "plain bread"]
    forward = BM25Index(ids, texts)
    backward = BM25Index(ids[::-1], texts[::-1])
    for query in ("apple", "apple pie", "bread", "tart green"):
        assert forward.rank(query) == backward.rank(query)
