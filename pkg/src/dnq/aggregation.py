"""Answer aggregation: majority voting and viewpoint clustering.

Objective questions take the most common answer. Subjective questions are
partitioned into viewpoints, each a summary plus the ids of the answers
sharing it. LLM backends must answer in the viewpoint text format::

    Viewpoint: <summary>
    Answer IDs: Answer 1, Answer 2, Answer 3
    Viewpoint: <summary>
    Answer ID: Answer 6

The Chinese rendering (``观点：`` / ``答案ID：答案1、答案2``) is accepted too.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Protocol, Sequence

from dnq.text import canonicalize, tokenize


class QuestionType(str, Enum):
    OBJECTIVE = "Objective"
    SUBJECTIVE = "Subjective"


class ClassifierUnavailable(RuntimeError):
    pass


class PartitionViolation(ValueError):
    pass


class ChatBackend(Protocol):
    def complete(self, messages: list[dict[str, str]]) -> str: ...


def answer_label(n: int) -> str:
    return f"Answer {n}"


def label_number(label: str) -> int:
    return int(label.rsplit(" ", 1)[1])


@dataclass(frozen=True)
class AnswerSet:
    question: str
    candidates: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple((i, t) for i, t in self.candidates))
        if not self.candidates:
            raise ValueError("an answer set needs at least one candidate")
        expected = [answer_label(n) for n in range(1, len(self.candidates) + 1)]
        if [i for i, _ in self.candidates] != expected:
            raise ValueError("answer ids must run Answer 1..Answer N in order")

    @classmethod
    def from_texts(cls, question: str, texts: Iterable[str]) -> AnswerSet:
        return cls(question, tuple((answer_label(n), t) for n, t in enumerate(texts, 1)))

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.candidates]


@dataclass(frozen=True)
class Viewpoint:
    summary: str
    member_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "member_ids", tuple(self.member_ids))
        if not self.member_ids:
            raise PartitionViolation("a viewpoint needs at least one answer id")

    def to_dict(self) -> dict:
        return {"summary": self.summary, "answer_ids": list(self.member_ids)}


# -- classification -------------------------------------------------------

# A question is Subjective when it contains one of these tokens or phrases;
# everything else, including the empty string, is Objective.
SUBJECTIVE_TOKENS = frozenset(
    {
        "good", "bad", "better", "worse", "best", "worst", "should", "opinion",
        "think", "feel", "favorite", "favourite", "recommend", "worth", "prefer",
        "like", "beautiful", "ugly", "overrated", "underrated", "meaning",
    }
)
SUBJECTIVE_PHRASES = ("what do you", "do you think", "how do you feel", "is it worth")


def heuristic_classifier(question: str) -> QuestionType:
    text = canonicalize(question)
    if any(p in text for p in SUBJECTIVE_PHRASES):
        return QuestionType.SUBJECTIVE
    if SUBJECTIVE_TOKENS.intersection(tokenize(text)):
        return QuestionType.SUBJECTIVE
    return QuestionType.OBJECTIVE


class LLMClassifier:
    """Asks a chat backend for ``Objective`` or ``Subjective``."""

    PROMPT = (
        "Classify the question. Reply with exactly one word: Objective for a factual "
        "question with a single correct answer, Subjective for an opinion question."
    )

    def __init__(self, backend: ChatBackend):
        self.backend = backend

    def __call__(self, question: str) -> QuestionType:
        try:
            reply = self.backend.complete(
                [{"role": "system", "content": self.PROMPT}, {"role": "user", "content": question}]
            )
        except Exception as exc:
            raise ClassifierUnavailable(str(exc)) from exc
        words = set(re.findall(r"[a-z]+", reply.lower()))
        if ("objective" in words) == ("subjective" in words):
            raise ClassifierUnavailable(f"unusable classifier reply: {reply!r}")
        return QuestionType.OBJECTIVE if "objective" in words else QuestionType.SUBJECTIVE


def classify_question(
    question: str, classifier: Callable[[str], QuestionType] = heuristic_classifier
) -> QuestionType:
    if not question.strip():
        return QuestionType.OBJECTIVE
    return QuestionType(classifier(question))


# -- voting ---------------------------------------------------------------


def majority_vote(answers: AnswerSet) -> str:
    """Most frequent answer by canonical form; ties go to the lowest answer id."""
    counts = Counter(canonicalize(text) for _, text in answers.candidates)
    best = max(counts.values())
    for _, text in answers.candidates:
        if counts[canonicalize(text)] == best:
            return text
    raise AssertionError("unreachable")


# -- viewpoints -----------------------------------------------------------


def jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def heuristic_viewpoints(answers: AnswerSet, threshold: float = 0.3) -> list[Viewpoint]:
    """Single-link clustering on token Jaccard similarity (linked when >= threshold)."""
    tokens = [set(tokenize(text)) for _, text in answers.candidates]
    parent = list(range(len(tokens)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(tokens)):
        for j in range(i + 1, len(tokens)):
            if jaccard(tokens[i], tokens[j]) >= threshold:
                ri, rj = find(i), find(j)
                parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(len(tokens)):
        groups.setdefault(find(i), []).append(i)
    out = []
    for members in groups.values():
        # Longest member summarizes the cluster; max() keeps the lowest id on ties.
        longest = max(members, key=lambda i: len(answers.candidates[i][1]))
        out.append(
            Viewpoint(answers.candidates[longest][1], tuple(answers.candidates[i][0] for i in members))
        )
    return sort_viewpoints(out)


def sort_viewpoints(viewpoints: Iterable[Viewpoint]) -> list[Viewpoint]:
    ordered = [
        Viewpoint(v.summary, tuple(sorted(v.member_ids, key=label_number))) for v in viewpoints
    ]
    return sorted(ordered, key=lambda v: label_number(v.member_ids[0]))


def validate_partition(viewpoints: Sequence[Viewpoint], ids: Iterable[str]) -> None:
    expected = set(ids)
    seen: set[str] = set()
    for vp in viewpoints:
        for member in vp.member_ids:
            if member not in expected:
                raise PartitionViolation(f"unknown answer id {member!r}")
            if member in seen:
                raise PartitionViolation(f"answer id {member!r} appears in two viewpoints")
            seen.add(member)
    missing = expected - seen
    if missing:
        raise PartitionViolation(f"answer ids not assigned: {sorted(missing, key=label_number)}")


_VIEW_LINE = re.compile(r"^(?:Viewpoint|观点)\s*:\s*(.*)$")
_IDS_LINE = re.compile(r"^(?:Answer\s+IDs?|答案\s*ID)\s*:\s*(.*)$", re.IGNORECASE)
_ID_ITEM = re.compile(r"^(?:Answer|答案)\s*(\d+)$", re.IGNORECASE)


def parse_viewpoints(text: str, ids: Iterable[str] | None = None) -> list[Viewpoint]:
    """Parse viewpoint blocks; validate against ``ids`` when given."""
    blocks: list[tuple[list[str], list[str] | None]] = []
    for raw in text.replace("：", ":").splitlines():
        line = raw.strip()
        if not line:
            continue
        if m := _VIEW_LINE.match(line):
            blocks.append(([m.group(1).strip()], None))
            continue
        if m := _IDS_LINE.match(line):
            if not blocks or blocks[-1][1] is not None:
                raise PartitionViolation("answer ids without a preceding viewpoint")
            members = []
            for item in re.split(r"[,，、]", m.group(1)):
                item = item.strip()
                if not item:
                    continue
                im = _ID_ITEM.match(item)
                if im is None:
                    raise PartitionViolation(f"malformed answer id {item!r}")
                members.append(answer_label(int(im.group(1))))
            blocks[-1] = (blocks[-1][0], members)
            continue
        if blocks and blocks[-1][1] is None:
            blocks[-1][0].append(line)
    if not blocks:
        raise PartitionViolation("no viewpoints in response")
    viewpoints = []
    for summary_lines, members in blocks:
        if not members:
            raise PartitionViolation(f"viewpoint {summary_lines[0]!r} lists no answer ids")
        viewpoints.append(Viewpoint(" ".join(s for s in summary_lines if s), tuple(members)))
    if ids is not None:
        validate_partition(viewpoints, ids)
    return sort_viewpoints(viewpoints)


def render_viewpoints(viewpoints: Sequence[Viewpoint]) -> str:
    lines = []
    for vp in viewpoints:
        key = "Answer IDs" if len(vp.member_ids) > 1 else "Answer ID"
        lines.append(f"Viewpoint: {vp.summary}")
        lines.append(f"{key}: {', '.join(vp.member_ids)}")
    return "\n".join(lines) + "\n"


AGGREGATION_PROMPT = (
    "Group the answers below by the viewpoint they express. For every group write a "
    "'Viewpoint: <one-sentence summary>' line followed by an 'Answer IDs: Answer i, "
    "Answer j' line. Every answer id must appear in exactly one group."
)


def aggregation_messages(answers: AnswerSet) -> list[dict[str, str]]:
    body = [f"Question: {answers.question}", ""]
    body += [f"{label}: {text}" for label, text in answers.candidates]
    return [
        {"role": "system", "content": AGGREGATION_PROMPT},
        {"role": "user", "content": "\n".join(body)},
    ]


def cluster_viewpoints(
    answers: AnswerSet, backend: ChatBackend | None = None, threshold: float = 0.3
) -> list[Viewpoint]:
    """Partition the answers into viewpoints.

    Without a backend the deterministic Jaccard clustering is used. With one,
    the reply is parsed and must partition the answer ids exactly, otherwise
    :class:`PartitionViolation` is raised so the caller can retry or fall back.
    """
    if backend is None:
        return heuristic_viewpoints(answers, threshold)
    reply = backend.complete(aggregation_messages(answers))
    return parse_viewpoints(reply, answers.ids)


def aggregate(
    answers: AnswerSet,
    classifier: Callable[[str], QuestionType] = heuristic_classifier,
    backend: ChatBackend | None = None,
    threshold: float = 0.3,
) -> tuple[QuestionType, str, list[Viewpoint] | None]:
    """Classify and aggregate; returns (type, aggregated text, viewpoints or None)."""
    qtype = classify_question(answers.question, classifier)
    if qtype is QuestionType.OBJECTIVE:
        return qtype, majority_vote(answers), None
    viewpoints = cluster_viewpoints(answers, backend, threshold)
    return qtype, render_viewpoints(viewpoints), viewpoints
