"""ArticleRetriever / PageRetriever backends: live MediaWiki API and an offline corpus."""

from __future__ import annotations

import html
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Protocol

import httpx

from dnq.bm25 import BM25Index
from dnq.text import canonicalize
from dnq.trajectory import MAX_ENTRIES_PER_CALL, Observation

log = logging.getLogger(__name__)

DEFAULT_API_URL = "https://en.wikipedia.org/w/api.php"
API_URL_ENV = "DNQ_WIKI_API_URL"
DEFAULT_USER_AGENT = "dnq/0.1 (decompose-and-query research agent)"
PAGE_CHAR_CAP = 1200
SEARCH_SNIPPET_CAP = 300


class NetworkError(RuntimeError):
    def __init__(self, status: int | None, note: str = ""):
        super().__init__(f"HTTP status {status}: {note}" if status else note)
        self.status = status


class MalformedResponse(RuntimeError):
    pass


_TAG = re.compile(r"<[^>]*>")
_BOLD_ITALIC = re.compile(r"'{2,}")
_WS = re.compile(r"\s+")


def strip_markup(text: str) -> str:
    """Plain text from a search snippet: drops tags, wiki quote runs and entities."""
    text = _TAG.sub("", text)
    text = html.unescape(text)
    text = _BOLD_ITALIC.sub("", text)
    # Entities may have decoded into new tags, e.g. "&lt;span&gt;".
    text = _TAG.sub("", text)
    return _WS.sub(" ", text).strip()


_SENTENCE_END = re.compile(r"[.!?。！？][\"')\]»”’]*(?=\s)")


def truncate_at_sentence(text: str, cap: int = PAGE_CHAR_CAP) -> str:
    """At most ``cap`` characters, cut after the last sentence terminator when possible."""
    text = text.strip()
    if len(text) <= cap:
        return text
    window = text[:cap]
    ends = [m.end() for m in _SENTENCE_END.finditer(window)]
    # A terminator followed by the character right after the window also counts.
    if window[-1] in ".!?。！？" and text[cap].isspace():
        ends.append(cap)
    if ends:
        return window[: max(ends)].rstrip()
    return window.rstrip()


@dataclass(frozen=True)
class WikiEntry:
    title: str
    snippet: str

    def __post_init__(self) -> None:
        if not self.title.strip():
            raise ValueError("entry title must be non-empty")


@dataclass(frozen=True)
class CorpusDoc:
    title: str
    body: str


class WikiBackend(Protocol):
    def search(self, query: str, limit: int) -> list[WikiEntry]: ...

    def page(self, title: str) -> str | None: ...


class OfflineCorpus:
    """Frozen corpus searched with BM25 over document bodies; deterministic."""

    def __init__(self, docs: list[CorpusDoc]):
        titles = [d.title for d in docs]
        if len(set(titles)) != len(titles):
            raise ValueError("corpus titles must be unique")
        self.docs = list(docs)
        self._by_title = {d.title: d for d in self.docs}
        self._by_canonical = {canonicalize(d.title): d for d in self.docs}
        self.index = BM25Index([d.body for d in self.docs])

    @classmethod
    def from_jsonl(cls, path) -> OfflineCorpus:
        with open(path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        return cls([CorpusDoc(r["title"], r["body"]) for r in rows])

    def search(self, query: str, limit: int) -> list[WikiEntry]:
        hits = self.index.search(query, limit, [d.title for d in self.docs])
        return [
            WikiEntry(self.docs[i].title, truncate_at_sentence(self.docs[i].body, SEARCH_SNIPPET_CAP))
            for i, _ in hits
        ]

    def page(self, title: str) -> str | None:
        doc = self._by_title.get(title) or self._by_canonical.get(canonicalize(title))
        return doc.body if doc else None


class MediaWikiClient:
    """MediaWiki Action API client with rate limiting and bounded retries.

    Search uses ``list=search``. Page text comes from the TextExtracts
    ``prop=extracts`` endpoint (plain-text intro); wikis without that
    extension fall back to the best search snippet for the title.
    """

    def __init__(
        self,
        api_url: str | None = None,
        user_agent: str = DEFAULT_USER_AGENT,
        min_interval: float = 0.1,
        attempts: int = 3,
        backoff: float = 0.5,
        timeout: float = 15.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        if not user_agent or not user_agent.strip():
            raise ValueError("a User-Agent string is required by the MediaWiki API policy")
        self.api_url = api_url or os.environ.get(API_URL_ENV) or DEFAULT_API_URL
        self.user_agent = user_agent
        self.min_interval = min_interval
        self.attempts = attempts
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep
        self._clock = clock
        self._lock = threading.Lock()
        self._last_call: float | None = None

    def _throttle(self) -> None:
        with self._lock:
            now = self._clock()
            if self._last_call is not None:
                wait = self.min_interval - (now - self._last_call)
                if wait > 0:
                    self._sleep(wait)
                    now = self._clock()
            self._last_call = now

    def _get(self, params: dict[str, Any]) -> dict[str, Any]:
        params = {"format": "json", **params}
        status: int | None = None
        note = ""
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            self._throttle()
            try:
                resp = self.client.get(
                    self.api_url, params=params, headers={"User-Agent": self.user_agent}
                )
            except httpx.TransportError as exc:
                status, note = None, f"transport error: {exc}"
                log.warning("MediaWiki request failed (attempt %d): %s", attempt + 1, exc)
                continue
            status = resp.status_code
            if status == 429 or status >= 500:
                note = resp.text[:200]
                log.warning("MediaWiki returned %d (attempt %d)", status, attempt + 1)
                continue
            if status >= 400:
                raise NetworkError(status, resp.text[:200])
            try:
                data = resp.json()
            except ValueError as exc:
                raise MalformedResponse(f"response is not JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise MalformedResponse("response is not a JSON object")
            if "error" in data:
                raise MalformedResponse(f"API error: {data['error']}")
            return data
        raise NetworkError(status, note or "retries exhausted")

    def search(self, query: str, limit: int) -> list[WikiEntry]:
        data = self._get(
            {"action": "query", "list": "search", "srsearch": query, "srlimit": limit}
        )
        try:
            hits = data["query"]["search"]
            return [WikiEntry(h["title"], strip_markup(h.get("snippet", ""))) for h in hits]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"unexpected search payload: {exc}") from exc

    def page(self, title: str) -> str | None:
        data = self._get(
            {
                "action": "query",
                "prop": "extracts",
                "explaintext": 1,
                "exintro": 1,
                "redirects": 1,
                "titles": title,
            }
        )
        try:
            pages = list(data["query"]["pages"].values())
        except (KeyError, TypeError, AttributeError) as exc:
            raise MalformedResponse(f"unexpected extracts payload: {exc}") from exc
        if not pages or "missing" in pages[0] or "invalid" in pages[0]:
            return None
        if "extract" in pages[0]:
            return pages[0]["extract"] or None
        for entry in self.search(title, 1):
            if canonicalize(entry.title) == canonicalize(pages[0].get("title", title)):
                return entry.snippet or None
        return None


def article_search(backend: WikiBackend, query: str, limit: int = MAX_ENTRIES_PER_CALL) -> Observation:
    if not 1 <= limit <= MAX_ENTRIES_PER_CALL:
        raise ValueError(f"limit must be within 1..{MAX_ENTRIES_PER_CALL}")
    entries = backend.search(query, limit)[:limit]
    return Observation.of_entries((e.title, e.snippet) for e in entries)


def page_fetch(backend: WikiBackend, title: str, char_cap: int = PAGE_CHAR_CAP) -> Observation:
    if not title.strip():
        raise ValueError("title must be non-empty")
    text = backend.page(title.strip())
    if not text or not text.strip():
        return Observation.empty()
    return Observation.of_entries([(title.strip(), truncate_at_sentence(text, char_cap))])
