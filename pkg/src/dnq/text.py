"""Canonicalization and tokenization shared by the QA base, corpus and aggregation."""

import re

_WS = re.compile(r"\s+")
_TOKEN = re.compile(r"\w+", re.UNICODE)


def canonicalize(text: str) -> str:
    """Lowercase, trim and collapse internal whitespace. No stemming."""
    return _WS.sub(" ", text.strip().lower())


def tokenize(text: str) -> list[str]:
    """Unigram tokens of the canonical form of ``text``."""
    return _TOKEN.findall(canonicalize(text))
