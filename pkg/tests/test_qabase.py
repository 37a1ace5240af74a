import json

import httpx
import pytest

from dnq.aggregation import QuestionType
from dnq.qabase import (
    HTTPScorer,
    QAStore,
    RawQAPair,
    ScorerConfig,
    ScorerUnavailable,
    StoreUnavailable,
    answer_retrieve,
    build_base,
    heuristic_gec,
    heuristic_intent,
    question_retrieve,
    select_top_frequency,
)
from dnq.trajectory import ObsKind


def test_scorer_config_validation():
    with pytest.raises(ValueError):
        ScorerConfig(epsilon1=1.5)
    with pytest.raises(ValueError):
        ScorerConfig(top_k=0)


def test_heuristic_scores():
    assert heuristic_gec("What is the capital of France?") == 1.0
    assert heuristic_gec("aaaaaaaa") < 0.5
    assert heuristic_gec("") == 0.0
    assert heuristic_intent("What is the capital of France?") == pytest.approx(1.0)
    assert heuristic_intent("I went to the market") == pytest.approx(0.1)
    assert heuristic_intent("capital of France?") == pytest.approx(0.6)


def test_http_scorer_with_mock_transport():
    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        if body["text"] == "bad":
            return httpx.Response(503)
        if body["text"] == "odd":
            return httpx.Response(200, json={"score": 7})
        return httpx.Response(200, json={"score": 0.75})

    scorer = HTTPScorer("http://scorer/score", client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert scorer("fine") == 0.75
    with pytest.raises(ScorerUnavailable):
        scorer("bad")
    with pytest.raises(ScorerUnavailable):
        scorer("odd")


def test_select_top_frequency_ties_and_limits():
    got = select_top_frequency(["b", "a", "B", "c", "a"], 2)
    assert [(s.question, s.frequency) for s in got] == [("a", 2), ("b", 2)]
    with pytest.raises(ValueError):
        select_top_frequency(["a"], 0)


def test_build_base_from_fixture(raw_pairs):
    store = build_base(raw_pairs, ScorerConfig())
    by_q = {r.question: r for r in store.records}
    assert set(by_q) == {
        "what is the capital of france?",
        "how many legs does a spider have?",
        "what do you think about remote work?",
        "who wrote hamlet?",
    }
    france = by_q["what is the capital of france?"]
    assert france.aggregated_answer == "Paris" and france.frequency == 4
    assert france.question_type is QuestionType.OBJECTIVE
    assert by_q["how many legs does a spider have?"].aggregated_answer == "Eight"
    remote = by_q["what do you think about remote work?"]
    assert remote.question_type is QuestionType.SUBJECTIVE
    assert remote.aggregated_answer.startswith("Viewpoint: ")
    # Records come out most frequent first.
    assert [r.frequency for r in store.records] == sorted((r.frequency for r in store.records), reverse=True)


def test_top_k_keeps_most_frequent(raw_pairs):
    store = build_base(raw_pairs, ScorerConfig(top_k=1))
    assert [r.question for r in store.records] == ["what is the capital of france?"]


def test_retrievers(chitchat_store):
    obs = question_retrieve(chitchat_store, "capital France", 5)
    assert obs.kind is ObsKind.ENTRIES
    assert obs.entries[0] == ("what is the capital of france?", "Objective question, asked 4 times")
    assert question_retrieve(chitchat_store, "xylophone").kind is ObsKind.EMPTY
    with pytest.raises(ValueError):
        question_retrieve(chitchat_store, "capital", 6)
    assert answer_retrieve(chitchat_store, "  WHO wrote hamlet? ").answer == "William Shakespeare"
    assert answer_retrieve(chitchat_store, "who wrote macbeth?").kind is ObsKind.EMPTY


def test_save_load_roundtrip(tmp_path, chitchat_store):
    chitchat_store.save(tmp_path)
    loaded = QAStore.load(tmp_path)
    assert loaded.records == chitchat_store.records
    assert loaded.question_retrieve("spider legs") == chitchat_store.question_retrieve("spider legs")
    row = json.loads((tmp_path / "records.jsonl").read_text().splitlines()[0])
    assert list(row) == ["question", "aggregated_answer", "question_type", "frequency",
                         "gec_score", "intent_score", "schema_version"]


def test_corrupt_sidecar_is_rebuilt(tmp_path, chitchat_store, caplog):
    chitchat_store.save(tmp_path)
    (tmp_path / "postings.json").write_text("{not json")
    loaded = QAStore.load(tmp_path)
    assert loaded.question_retrieve("spider legs") == chitchat_store.question_retrieve("spider legs")
    assert "rebuilding" in caplog.text


def test_missing_store(tmp_path):
    with pytest.raises(StoreUnavailable):
        QAStore.load(tmp_path / "nowhere")
    (tmp_path / "records.jsonl").write_text('{"question": "q"}\n')
    with pytest.raises(StoreUnavailable):
        QAStore.load(tmp_path)


def test_raw_pair_validation():
    with pytest.raises(ValueError):
        RawQAPair("q?", " ")
