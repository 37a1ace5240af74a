"""Reliable QA base: filtering, frequency selection, storage and the two QA tools.

A store is a directory holding ``records.jsonl`` (one QARecord per line) and
``postings.json``, the BM25 sidecar. The sidecar is derived data and is
rebuilt from the records whenever it is missing or does not match them.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, NamedTuple

import httpx

from dnq import SCHEMA_VERSION
from dnq.aggregation import (
    AnswerSet,
    ChatBackend,
    QuestionType,
    aggregate,
    heuristic_classifier,
)
from dnq.bm25 import BM25Index
from dnq.text import canonicalize
from dnq.trajectory import MAX_ENTRIES_PER_CALL, Observation

log = logging.getLogger(__name__)

Scorer = Callable[[str], float]

RECORDS_FILE = "records.jsonl"
POSTINGS_FILE = "postings.json"


class StoreUnavailable(RuntimeError):
    pass


class ScorerUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class RawQAPair:
    question: str
    answer: str
    source_id: str = ""

    def __post_init__(self) -> None:
        if not self.question.strip() or not self.answer.strip():
            raise ValueError("question and answer must be non-empty")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RawQAPair:
        return cls(data["question"], data["answer"], str(data.get("source_id", "")))


def read_raw_pairs(path) -> list[RawQAPair]:
    with open(path, encoding="utf-8") as fh:
        return [RawQAPair.from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class QARecord:
    question: str
    aggregated_answer: str
    question_type: QuestionType
    frequency: int
    gec_score: float
    intent_score: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "aggregated_answer": self.aggregated_answer,
            "question_type": self.question_type.value,
            "frequency": self.frequency,
            "gec_score": self.gec_score,
            "intent_score": self.intent_score,
            "schema_version": SCHEMA_VERSION,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> QARecord:
        return cls(
            data["question"],
            data["aggregated_answer"],
            QuestionType(data["question_type"]),
            int(data["frequency"]),
            float(data["gec_score"]),
            float(data["intent_score"]),
        )


@dataclass(frozen=True)
class ScorerConfig:
    epsilon1: float = 0.5
    epsilon2: float = 0.5
    top_k: int = 50_000

    def __post_init__(self) -> None:
        if not (0.0 <= self.epsilon1 <= 1.0 and 0.0 <= self.epsilon2 <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")


# -- scorers --------------------------------------------------------------

_CLEAN_CHARS = re.compile(r"[\w\s.,?!'\"():;\-]", re.UNICODE)
_REPEAT_RUN = re.compile(r"(.)\1{3,}")
_INTENT_CUES = frozenset(
    {
        "what", "who", "whom", "whose", "when", "where", "which", "why", "how", "is",
        "are", "was", "were", "do", "does", "did", "can", "could", "should", "would",
        "will", "please", "tell", "give", "explain", "describe", "list", "write", "show",
    }
)


def heuristic_gec(question: str) -> float:
    """Surface well-formedness in [0, 1].

    Share of ordinary word/punctuation characters, halved for runs of four
    or more identical characters and halved again for single-token text.
    """
    text = question.strip()
    if not text:
        return 0.0
    score = len(_CLEAN_CHARS.findall(text)) / len(text)
    if _REPEAT_RUN.search(text):
        score *= 0.5
    if len(text.split()) < 2:
        score *= 0.5
    return max(0.0, min(1.0, score))


def heuristic_intent(question: str) -> float:
    """Intent clarity in [0, 1]: 0.1 base, +0.5 for a trailing '?', +0.4 for a cue word first."""
    text = question.strip()
    if not text:
        return 0.0
    score = 0.1
    if text.endswith("?"):
        score += 0.5
    words = canonicalize(text).split()
    if words and words[0].strip("\"'") in _INTENT_CUES:
        score += 0.4
    return min(1.0, score)


class HTTPScorer:
    """Remote scorer: POST ``{"text": ...}`` and read ``{"score": float}`` back."""

    def __init__(self, url: str, client: httpx.Client | None = None, timeout: float = 10.0):
        self.url = url
        self.client = client or httpx.Client(timeout=timeout)

    def __call__(self, text: str) -> float:
        try:
            resp = self.client.post(self.url, json={"text": text})
            resp.raise_for_status()
            score = float(resp.json()["score"])
        except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
            raise ScorerUnavailable(f"{self.url}: {exc}") from exc
        if not 0.0 <= score <= 1.0:
            raise ScorerUnavailable(f"{self.url}: score {score} outside [0, 1]")
        return score


# -- construction ---------------------------------------------------------


def filter_reliable(
    pairs: Iterable[RawQAPair], gec: Scorer, intent: Scorer, cfg: ScorerConfig
) -> set[str]:
    """Questions passing both the grammar and intent thresholds (strictly above)."""
    kept: set[str] = set()
    for pair in pairs:
        q = pair.question
        if gec(q) > cfg.epsilon1 and intent(q) > cfg.epsilon2:
            kept.add(q)
    return kept


class QuestionStub(NamedTuple):
    question: str
    frequency: int


def select_top_frequency(questions: Iterable[str], k: int) -> list[QuestionStub]:
    """The ``k`` most frequent canonical questions; ties by canonical text."""
    if k < 1:
        raise ValueError("k must be at least 1")
    counts = Counter(canonicalize(q) for q in questions)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return [QuestionStub(q, n) for q, n in ranked[:k]]


def build_records(
    pairs: list[RawQAPair],
    cfg: ScorerConfig,
    gec: Scorer = heuristic_gec,
    intent: Scorer = heuristic_intent,
    classifier: Callable[[str], QuestionType] = heuristic_classifier,
    aggregator: ChatBackend | None = None,
    jaccard_threshold: float = 0.3,
) -> list[QARecord]:
    gec_scores = {q: gec(q) for q in {p.question for p in pairs}}
    intent_scores = {q: intent(q) for q in gec_scores}
    reliable = filter_reliable(pairs, gec_scores.__getitem__, intent_scores.__getitem__, cfg)
    kept = [p for p in pairs if p.question in reliable]

    groups: dict[str, list[RawQAPair]] = {}
    for pair in kept:
        groups.setdefault(canonicalize(pair.question), []).append(pair)

    records = []
    for stub in select_top_frequency((p.question for p in kept), cfg.top_k):
        group = groups[stub.question]
        first = group[0].question
        answers = AnswerSet.from_texts(first, (p.answer for p in group))
        qtype, text, _ = aggregate(answers, classifier, aggregator, jaccard_threshold)
        records.append(
            QARecord(
                question=stub.question,
                aggregated_answer=text,
                question_type=qtype,
                frequency=stub.frequency,
                gec_score=gec_scores[first],
                intent_score=intent_scores[first],
            )
        )
    return records


# -- store ----------------------------------------------------------------


class QAStore:
    """Immutable once built; safe for concurrent readers."""

    def __init__(self, records: list[QARecord], index: BM25Index | None = None):
        self.records = list(records)
        self.index = index or BM25Index([r.question for r in self.records])
        self._by_question = {canonicalize(r.question): r for r in self.records}
        self._keys = [canonicalize(r.question) for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def lookup(self, question: str) -> QARecord | None:
        return self._by_question.get(canonicalize(question))

    def question_retrieve(self, query: str, limit: int = MAX_ENTRIES_PER_CALL) -> Observation:
        if not 1 <= limit <= MAX_ENTRIES_PER_CALL:
            raise ValueError(f"limit must be within 1..{MAX_ENTRIES_PER_CALL}")
        hits = self.index.search(query, limit, self._keys)
        return Observation.of_entries(
            (
                self.records[doc].question,
                f"{self.records[doc].question_type.value} question, asked "
                f"{self.records[doc].frequency} times",
            )
            for doc, _ in hits
        )

    def answer_retrieve(self, question: str) -> Observation:
        record = self.lookup(question)
        if record is None:
            return Observation.empty()
        return Observation.of_answer(record.aggregated_answer)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / RECORDS_FILE, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
        sidecar = {"schema_version": SCHEMA_VERSION, "n_docs": len(self.records)}
        sidecar.update(self.index.to_dict())
        with open(directory / POSTINGS_FILE, "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, ensure_ascii=False, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory) -> QAStore:
        directory = Path(directory)
        try:
            with open(directory / RECORDS_FILE, encoding="utf-8") as fh:
                records = [QARecord.from_dict(json.loads(line)) for line in fh if line.strip()]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise StoreUnavailable(f"cannot read QA store at {directory}: {exc}") from exc
        index = None
        try:
            with open(directory / POSTINGS_FILE, encoding="utf-8") as fh:
                sidecar = json.load(fh)
            if sidecar.get("n_docs") == len(records):
                index = BM25Index.from_dict(sidecar)
        except (OSError, ValueError, KeyError, TypeError):
            log.warning("postings sidecar in %s unusable; rebuilding from records", directory)
        return cls(records, index)


def build_base(pairs: list[RawQAPair], cfg: ScorerConfig, **kwargs: Any) -> QAStore:
    return QAStore(build_records(pairs, cfg, **kwargs))


def question_retrieve(base: QAStore, query: str, limit: int = MAX_ENTRIES_PER_CALL) -> Observation:
    return base.question_retrieve(query, limit)


def answer_retrieve(base: QAStore, question: str) -> Observation:
    return base.answer_retrieve(question)
