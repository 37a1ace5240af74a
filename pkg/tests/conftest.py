from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from dnq.engine import ToolRegistry
from dnq.grammar import Decompose, Invoke, Rollback, Toolset
from dnq.policy import PolicyContext
from dnq.qabase import RawQAPair, ScorerConfig, build_base, read_raw_pairs
from dnq.trajectory import Tool, ToolCall
from dnq.wiki import CorpusDoc, OfflineCorpus

FIXTURES = Path(__file__).parent / "fixtures"

# Filled by tests/test_acceptance.py and printed in the terminal summary.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def twohop_corpus() -> OfflineCorpus:
    return OfflineCorpus.from_jsonl(FIXTURES / "twohop_corpus.jsonl")


@pytest.fixture(scope="session")
def twohop_questions() -> list[dict]:
    return json.loads((FIXTURES / "twohop_questions.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def twohop_scripts() -> dict[str, list[str]]:
    rows = [json.loads(line) for line in (FIXTURES / "twohop_scripts.jsonl").read_text().splitlines()]
    return {row["id"]: row["actions"] for row in rows}


@pytest.fixture
def wiki_registry(twohop_corpus) -> ToolRegistry:
    return ToolRegistry.wiki(twohop_corpus)


@pytest.fixture(scope="session")
def raw_pairs() -> list[RawQAPair]:
    return read_raw_pairs(FIXTURES / "raw_pairs.jsonl")


@pytest.fixture
def chitchat_store(raw_pairs):
    return build_base(raw_pairs, ScorerConfig())


def small_corpus() -> OfflineCorpus:
    return OfflineCorpus(
        [
            CorpusDoc("Alpha", "Alpha is a letter. It comes first in the Greek alphabet."),
            CorpusDoc("Beta", "Beta follows alpha. Beta software is unfinished."),
            CorpusDoc("Gamma", "Gamma rays are energetic. Gamma is the third letter."),
        ]
    )


QUERY_WORDS = [
    "varnholt", "bridge", "quance", "pelk", "ossel", "river", "kirrow", "lake",
    "designer", "birthplace", "sculptor", "depth", "zzz", "unknownword", "mentor",
]
TITLES = ["Varnholt Bridge", "Mirela Quance", "Doran Pelk", "Ossel River", "Kirrow Lake", "Missing Page"]


class RandomPolicy:
    """Emits random well-formed actions for the given toolset."""

    def __init__(self, rng: random.Random, toolset: Toolset = Toolset.WIKI, finish_p: float = 0.08):
        self.rng = rng
        self.toolset = toolset
        self.finish_p = finish_p
        self.contexts: list[PolicyContext] = []

    def _words(self) -> str:
        return " ".join(self.rng.choice(QUERY_WORDS) for _ in range(self.rng.randint(1, 3)))

    def next_action(self, ctx: PolicyContext):
        self.contexts.append(ctx)
        r = self.rng.random()
        if r < self.finish_p:
            return Invoke(ToolCall(Tool.FINISH, self._words()))
        if r < 0.25:
            return Decompose(self._words() + "?")
        if r < 0.35:
            return Rollback()
        if self.toolset is Toolset.WIKI:
            if self.rng.random() < 0.7:
                return Invoke(ToolCall(Tool.ARTICLE_RETRIEVER, self._words()))
            return Invoke(ToolCall(Tool.PAGE_RETRIEVER, self.rng.choice(TITLES)))
        if self.rng.random() < 0.6:
            return Invoke(ToolCall(Tool.QUESTION_RETRIEVER, self._words()))
        return Invoke(ToolCall(Tool.ANSWER_RETRIEVER, self._words()))
