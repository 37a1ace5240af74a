import json

import httpx
import pytest

from conftest import FIXTURES, small_corpus
from dnq.trajectory import ObsKind
from dnq.wiki import (
    MalformedResponse,
    MediaWikiClient,
    NetworkError,
    article_search,
    page_fetch,
    strip_markup,
    truncate_at_sentence,
)


def fixture_json(name: str) -> dict:
    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))


class FakeClock:
    def __init__(self):
        self.now = 100.0
        self.sleeps: list[float] = []

    def clock(self) -> float:
        return self.now

    def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self.now += seconds


def make_client(handler, clock: FakeClock | None = None, **kwargs) -> MediaWikiClient:
    clock = clock or FakeClock()
    return MediaWikiClient(
        api_url="https://wiki.test/w/api.php",
        client=httpx.Client(transport=httpx.MockTransport(handler)),
        sleep=clock.sleep,
        clock=clock.clock,
        **kwargs,
    )


def test_strip_markup():
    snippet = 'A <span class="searchmatch">tower</span> &amp; a \'\'\'bridge\'\'\' &lt;b&gt;x&lt;/b&gt;'
    assert strip_markup(snippet) == "A tower & a bridge x"


def test_truncate_at_sentence():
    text = "One two. Three four! Five six seven eight nine ten."
    assert truncate_at_sentence(text, 200) == text
    assert truncate_at_sentence(text, 25) == "One two. Three four!"
    assert truncate_at_sentence("No terminator anywhere here", 10) == "No termina"
    assert truncate_at_sentence("Ends here. Next", 10) == "Ends here."
    assert truncate_at_sentence("Pi is 3.14 exactly and more", 12) == "Pi is 3.14 e"
    assert len(truncate_at_sentence("x" * 5000)) == 1200


def test_offline_corpus():
    corpus = small_corpus()
    hits = corpus.search("alpha letter", 5)
    assert [h.title for h in hits] == ["Alpha", "Beta", "Gamma"]
    assert corpus.search("nothing matches", 5) == []
    assert corpus.page("alpha") == corpus.page("Alpha")
    assert corpus.page("Delta") is None


def test_tool_wrappers():
    corpus = small_corpus()
    obs = article_search(corpus, "gamma", 5)
    assert obs.titles() == ["Gamma"]
    assert article_search(corpus, "zzz").kind is ObsKind.EMPTY
    with pytest.raises(ValueError):
        article_search(corpus, "gamma", 6)
    page = page_fetch(corpus, "Beta", char_cap=20)
    assert page.entries == (("Beta", "Beta follows alpha."),)
    assert page_fetch(corpus, "Delta").kind is ObsKind.EMPTY


def test_search_against_recorded_payload():
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json=fixture_json("mediawiki_search.json"))

    client = make_client(handler)
    hits = client.search("eiffel tower", 3)
    assert [h.title for h in hits] == ["Eiffel Tower", "Gustave Eiffel", "Champ de Mars"]
    assert hits[1].snippet == "Alexandre Gustave Eiffel was a French civil engineer & designer."
    params = seen[0].url.params
    assert params["list"] == "search" and params["srlimit"] == "3" and params["format"] == "json"
    assert seen[0].headers["User-Agent"].startswith("dnq/")


def test_page_extract_and_missing():
    payloads = [fixture_json("mediawiki_page.json"), fixture_json("mediawiki_missing.json")]
    client = make_client(lambda request: httpx.Response(200, json=payloads.pop(0)))
    text = client.page("Eiffel tower")
    assert text.startswith("The Eiffel Tower is a wrought-iron")
    assert client.page("Nonexistent Page Xyz") is None


def test_page_without_extracts_falls_back_to_search():
    def handler(request):
        if request.url.params.get("prop") == "extracts":
            return httpx.Response(200, json={"query": {"pages": {"9232": {"title": "Eiffel Tower"}}}})
        return httpx.Response(200, json=fixture_json("mediawiki_search.json"))

    assert make_client(handler).page("Eiffel Tower").startswith("The Eiffel Tower is")


def test_retries_with_backoff_then_success():
    replies = [httpx.Response(503, text="busy"), httpx.Response(429), httpx.Response(
        200, json=fixture_json("mediawiki_search.json"))]
    clock = FakeClock()
    client = make_client(lambda request: replies.pop(0), clock, min_interval=0.0)
    assert len(client.search("x", 3)) == 3
    assert clock.sleeps == [0.5, 1.0]


def test_retries_exhausted_and_client_errors():
    client = make_client(lambda request: httpx.Response(502), min_interval=0.0)
    with pytest.raises(NetworkError) as err:
        client.search("x", 1)
    assert err.value.status == 502

    calls = []

    def not_found(request):
        calls.append(request)
        return httpx.Response(404)

    with pytest.raises(NetworkError):
        make_client(not_found).search("x", 1)
    assert len(calls) == 1


def test_transport_errors_are_retried():
    attempts = []

    def handler(request):
        attempts.append(1)
        raise httpx.ConnectError("down")

    with pytest.raises(NetworkError):
        make_client(handler, min_interval=0.0).search("x", 1)
    assert len(attempts) == 3


def test_malformed_payloads():
    with pytest.raises(MalformedResponse):
        make_client(lambda r: httpx.Response(200, text="<html>")).search("x", 1)
    with pytest.raises(MalformedResponse):
        make_client(lambda r: httpx.Response(200, json={"error": {"code": "x"}})).search("x", 1)
    with pytest.raises(MalformedResponse):
        make_client(lambda r: httpx.Response(200, json={"query": {}})).search("x", 1)


def test_rate_limit_spacing():
    clock = FakeClock()
    client = make_client(
        lambda r: httpx.Response(200, json={"query": {"search": []}}), clock, min_interval=0.1
    )
    client.search("a", 1)
    client.search("b", 1)
    assert clock.sleeps == [pytest.approx(0.1)]


def test_api_url_from_environment(monkeypatch):
    monkeypatch.setenv("DNQ_WIKI_API_URL", "https://mirror.test/api.php")
    assert MediaWikiClient().api_url == "https://mirror.test/api.php"
    with pytest.raises(ValueError):
        MediaWikiClient(user_agent=" ")
