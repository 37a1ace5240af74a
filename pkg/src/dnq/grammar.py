"""Action grammar between a policy's free text and the engine.

One action per line, introduced by a bracketed token::

    [ToolName] <argument to end of line>
    [Decompose] <sub-question>
    [Rollback]

Any prose may precede the token. The first well-formed token wins and the
rest of the text is ignored. Tool names are case-sensitive and must belong
to the active toolset.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Union

from dnq.trajectory import Tool, ToolCall


class Toolset(str, Enum):
    CHITCHAT = "chitchat"
    WIKI = "wiki"

    @property
    def tools(self) -> tuple[Tool, ...]:
        if self is Toolset.CHITCHAT:
            return (Tool.QUESTION_RETRIEVER, Tool.ANSWER_RETRIEVER, Tool.FINISH)
        return (Tool.ARTICLE_RETRIEVER, Tool.PAGE_RETRIEVER, Tool.FINISH)


class ParseError(ValueError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def _check_line_argument(text: str, what: str) -> None:
    if not text or text != text.strip() or "\n" in text or "\r" in text:
        raise ValueError(f"{what} must be a non-empty, trimmed, single-line string")


@dataclass(frozen=True)
class Invoke:
    call: ToolCall

    def __post_init__(self) -> None:
        if self.call.tool is Tool.DECOMPOSE:
            raise ValueError("use Decompose for sub-questions")
        _check_line_argument(self.call.argument, "tool argument")


@dataclass(frozen=True)
class Rollback:
    pass


@dataclass(frozen=True)
class Decompose:
    sub_question: str

    def __post_init__(self) -> None:
        _check_line_argument(self.sub_question, "sub-question")


Action = Union[Invoke, Rollback, Decompose]

_TOKEN = re.compile(r"\[([A-Za-z]+)\]")
_DISPATCHABLE = {t.value: t for t in Tool if t is not Tool.DECOMPOSE}


def _rest_of_line(text: str, start: int) -> str:
    end = len(text)
    for terminator in ("\n", "\r"):
        pos = text.find(terminator, start)
        if pos != -1:
            end = min(end, pos)
    return text[start:end].strip()


def parse_action(text: str | bytes, toolset: Toolset | str) -> Action:
    """Parse the first action in ``text``. Raises :class:`ParseError`."""
    toolset = Toolset(toolset)
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    for match in _TOKEN.finditer(text):
        name = match.group(1)
        arg = _rest_of_line(text, match.end())
        if name == "Rollback":
            return Rollback()
        if name == "Decompose":
            if arg:
                return Decompose(arg)
            continue
        tool = _DISPATCHABLE.get(name)
        if tool is None:
            continue
        if tool not in toolset.tools:
            raise ParseError(f"tool {name} is not available in the {toolset.value} toolset")
        if arg:
            return Invoke(ToolCall(tool, arg))
    raise ParseError("no well-formed action token found")


def render_action(action: Action) -> str:
    if isinstance(action, Invoke):
        return f"[{action.call.tool.value}] {action.call.argument}"
    if isinstance(action, Decompose):
        return f"[Decompose] {action.sub_question}"
    if isinstance(action, Rollback):
        return "[Rollback]"
    raise TypeError(f"not an action: {action!r}")
