"""
bm25.py
Okapi BM25 over an in-memory passage list.

idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))
score(q, d) = sum_t idf(t) * f(t, d) * (k1 + 1) / (f(t, d) + k1 * (1 - b + b * |d| / avgdl))

Tokens are lowercase alphanumeric runs. Rankings sort by score descending, then passage id.
"""

import math
import re
from collections import Counter, defaultdict
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DataError

TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> List[str]:
    return TOKEN_RE.findall(text.lower())


class BM25Index:
    """
    Minimal BM25 (Okapi) index with an inverted posting list per term.
    """

    def __init__(self, passage_ids: Sequence[str], texts: Sequence[str], k1: float = 1.2, b: float = 0.75):
        if not passage_ids:
            raise ConfigurationError("cannot index an empty corpus", field_path="corpus")
        if len(passage_ids) != len(texts):
            raise ConfigurationError("passage ids and texts differ in length", field_path="corpus")
        if k1 < 0 or not 0.0 <= b <= 1.0:
            raise ConfigurationError(f"invalid parameters k1={k1}, b={b}", field_path="bm25")

        self.k1 = k1
        self.b = b
        self.ids: List[str] = list(passage_ids)
        self.position: Dict[str, int] = {pid: i for i, pid in enumerate(self.ids)}
        if len(self.position) != len(self.ids):
            raise DataError("duplicate passage ids in corpus")

        docs = [tokenize(text) for text in texts]
        self.N = len(docs)
        self.doc_len = np.array([len(d) for d in docs], dtype=float)
        self.avgdl = float(self.doc_len.mean()) if self.N else 0.0

        self.postings: Dict[str, Dict[int, int]] = defaultdict(dict)
        for i, doc in enumerate(docs):
            for term, freq in Counter(doc).items():
                self.postings[term][i] = freq
        self.idf: Dict[str, float] = {
            term: math.log(1 + (self.N - len(post) + 0.5) / (len(post) + 0.5))
            for term, post in self.postings.items()
        }

    def scores(self, query: str) -> np.ndarray:
        """BM25 score of every passage, in corpus order."""
        scores = np.zeros(self.N, dtype=float)
        avgdl = self.avgdl if self.avgdl > 0 else 1.0
        norm = self.k1 * (1 - self.b + self.b * self.doc_len / avgdl)
        for term in tokenize(query):
            post = self.postings.get(term)
            if not post:
                continue
            idx = np.fromiter(post.keys(), dtype=int, count=len(post))
            freq = np.fromiter(post.values(), dtype=float, count=len(post))
            scores[idx] += self.idf[term] * freq * (self.k1 + 1) / (freq + norm[idx])
        return scores

    def rank(self, query: str, top_k: int = 0) -> List[Tuple[str, float]]:
        """(passage id, score) pairs, best first; top_k <= 0 returns everything."""
        scores = self.scores(query)
        order = sorted(range(self.N), key=lambda i: (-scores[i], self.ids[i]))
        if top_k > 0:
            order = order[:top_k]
        return [(self.ids[i], float(scores[i])) for i in order]

    def rank_of(self, query: str, passage_id: str) -> int:
        """1-based rank of one passage for the query."""
        if passage_id not in self.position:
            raise DataError(f"passage {passage_id!r} is not in the index")
        for position, (pid, _) in enumerate(self.rank(query), start=1):
            if pid == passage_id:
                return position
        raise DataError(f"passage {passage_id!r} missing from ranking")


def build_bm25_index(passages: Sequence, k1: float = 1.2, b: float = 0.75) -> BM25Index:
    """Index a list of passages (anything with .id and .text)."""
    if not passages:
        raise ConfigurationError("cannot index an empty corpus", field_path="corpus")
    return BM25Index([p.id for p in passages], [p.text for p in passages], k1=k1, b=b)
