"""Okapi BM25 over canonicalized unigrams.

Scoring, for a query with distinct terms ``t`` against document ``d``::

    idf(t)    = ln(1 + (N - n_t + 0.5) / (n_t + 0.5))
    score(d)  = sum_t idf(t) * tf(t, d) * (k1 + 1)
                      / (tf(t, d) + k1 * (1 - b + b * |d| / avgdl))

``N`` is the number of documents, ``n_t`` the number of documents holding
``t`` and ``avgdl`` the mean token length. Repeated query terms count once.
The ``1 +`` inside the log keeps every idf positive, so a document scores
above zero exactly when it shares at least one term with the query.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Any

from dnq.text import tokenize

K1 = 1.2
B = 0.75


class BM25Index:
    def __init__(self, documents: list[str], k1: float = K1, b: float = B):
        self.k1 = k1
        self.b = b
        self.doc_lens: list[int] = []
        self.postings: dict[str, list[tuple[int, int]]] = {}
        for i, doc in enumerate(documents):
            counts = Counter(tokenize(doc))
            self.doc_lens.append(sum(counts.values()))
            for term in sorted(counts):
                self.postings.setdefault(term, []).append((i, counts[term]))
        n = len(self.doc_lens)
        self.avgdl = sum(self.doc_lens) / n if n else 0.0

    def __len__(self) -> int:
        return len(self.doc_lens)

    def idf(self, term: str) -> float:
        n_t = len(self.postings.get(term, ()))
        return math.log(1.0 + (len(self) - n_t + 0.5) / (n_t + 0.5))

    def scores(self, query: str) -> dict[int, float]:
        """Scores of every document sharing a term with ``query`` (others are zero)."""
        out: dict[int, float] = {}
        for term in sorted(set(tokenize(query))):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for doc, tf in plist:
                norm = self.k1 * (1.0 - self.b + self.b * self.doc_lens[doc] / self.avgdl)
                out[doc] = out.get(doc, 0.0) + idf * tf * (self.k1 + 1.0) / (tf + norm)
        return out

    def search(self, query: str, limit: int, tiebreak: list[str]) -> list[tuple[int, float]]:
        """Top ``limit`` (doc, score) pairs with score > 0.

        Ordered by descending score, then by ``tiebreak[doc]`` ascending.
        """
        scored = [(doc, s) for doc, s in self.scores(query).items() if s > 0.0]
        scored.sort(key=lambda item: (-item[1], tiebreak[item[0]]))
        return scored[:limit]

    def to_dict(self) -> dict[str, Any]:
        return {
            "k1": self.k1,
            "b": self.b,
            "avgdl": self.avgdl,
            "doc_lens": self.doc_lens,
            "postings": {t: [list(p) for p in plist] for t, plist in self.postings.items()},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BM25Index:
        index = cls.__new__(cls)
        index.k1 = float(data["k1"])
        index.b = float(data["b"])
        index.avgdl = float(data["avgdl"])
        index.doc_lens = [int(x) for x in data["doc_lens"]]
        index.postings = {
            t: [(int(d), int(tf)) for d, tf in plist] for t, plist in data["postings"].items()
        }
        return index
