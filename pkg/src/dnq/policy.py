"""Policies that choose the next action, and the dialogue renderer they share.

The transcript of an episode is a linear dialogue: the episode question,
then one assistant turn per action and one user turn per observation.
Sub-questions appear inline (``[Decompose] ...`` followed by the child's
steps and its ``[Finish]``); abandoned branches are left out entirely.
The same renderer feeds the live policy and the SFT exporter.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol, Sequence, Union

import httpx

from dnq.grammar import (
    Action,
    Decompose,
    Invoke,
    ParseError,
    Rollback,
    Toolset,
    parse_action,
    render_action,
)
from dnq.trajectory import (
    NodeStatus,
    ObsKind,
    Observation,
    Tool,
    ToolCall,
    Trajectory,
    TrajectoryNode,
)

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 2


@dataclass(frozen=True)
class VisibleStep:
    """One assistant action and the observation it produced.

    ``obs`` is None for a sub-question opening, an explicit rollback and the
    episode's final Finish. ``negative`` marks steps from abandoned branches,
    which only the SFT exporter ever renders.
    """

    node_id: int
    action: Union[ToolCall, Decompose, Rollback]
    obs: Observation | None
    negative: bool = False


@dataclass(frozen=True)
class PolicyContext:
    episode_question: str
    visible_steps: tuple[VisibleStep, ...]
    toolset: Toolset
    remaining_budget: tuple[int, int] = (0, 0)
    notice: str | None = None


def _walk(traj: Trajectory, node: TrajectoryNode, with_exhausted: bool, negative: bool,
          out: list[VisibleStep]) -> None:
    slots: dict[int, list[TrajectoryNode]] = {}
    for child in sorted(traj.children(node.node_id), key=lambda n: n.node_id):
        slots.setdefault(child.spawned_at or 0, []).append(child)
    for i in range(len(node.steps) + 1):
        for child in slots.get(i, ()):
            exhausted = child.status is NodeStatus.EXHAUSTED
            if exhausted and not with_exhausted:
                continue
            neg = negative or exhausted
            out.append(VisibleStep(node.node_id, Decompose(child.question), None, neg))
            _walk(traj, child, with_exhausted, neg, out)
            auto = child.steps and child.steps[-1].obs.kind is ObsKind.EMPTY
            if exhausted and not auto:
                out.append(VisibleStep(child.node_id, Rollback(), None, neg))
        if i == len(node.steps):
            break
        step = node.steps[i]
        if step.call.tool is Tool.DECOMPOSE:
            continue  # rendered through the child node
        obs: Observation | None = step.obs
        terminal = (
            step.call.tool is Tool.FINISH
            and traj.terminal
            and node.node_id == traj.active_id
            and i == len(node.steps) - 1
        )
        if terminal:
            obs = None
        out.append(VisibleStep(node.node_id, step.call, obs, negative))


def visible_steps(traj: Trajectory, include_exhausted: bool = False) -> list[VisibleStep]:
    out: list[VisibleStep] = []
    _walk(traj, traj.root, include_exhausted, False, out)
    return out


def build_context(
    traj: Trajectory,
    toolset: Toolset | str,
    remaining_budget: tuple[int, int] = (0, 0),
    notice: str | None = None,
) -> PolicyContext:
    return PolicyContext(
        episode_question=traj.episode_question,
        visible_steps=tuple(visible_steps(traj)),
        toolset=Toolset(toolset),
        remaining_budget=remaining_budget,
        notice=notice,
    )


# -- rendering ------------------------------------------------------------

_GRAMMAR_HELP = (
    "Reply with exactly one action on its own line. You may think first.\n"
    "  [ToolName] <argument>   call a tool\n"
    "  [Decompose] <question>  open a sub-question and answer it first\n"
    "  [Rollback]              abandon the current sub-question\n"
    "You may call retrieval tools at most 10 times per question; each call "
    "returns at most 5 entries."
)

SYSTEM_PROMPTS = {
    Toolset.CHITCHAT: (
        "You answer questions using a reliable question-answer base. Its content "
        "takes precedence over your own knowledge.\nTools:\n"
        "  [QuestionRetriever] <query>   find related questions stored in the base\n"
        "  [AnswerRetriever] <question>  fetch the stored answer to a question\n"
        "  [Finish] <answer>             give the final answer\n" + _GRAMMAR_HELP
    ),
    Toolset.WIKI: (
        "You answer questions using Wikipedia.\nTools:\n"
        "  [ArticleRetriever] <query>  search Wikipedia entries\n"
        "  [PageRetriever] <title>     read the page of an entry\n"
        "  [Finish] <answer>           give the final answer\n" + _GRAMMAR_HELP
    ),
}


def render_observation(obs: Observation, after_finish: bool = False) -> str:
    if obs.kind is ObsKind.ENTRIES:
        return "\n".join(
            f"({i}) {title}: {snippet}" for i, (title, snippet) in enumerate(obs.entries or (), 1)
        )
    if obs.kind is ObsKind.ANSWER:
        return f"{'Sub-answer' if after_finish else 'Answer'}: {obs.answer}"
    if obs.kind is ObsKind.EMPTY:
        return "No results."
    return f"Error: {obs.error_note or 'tool failed'}"


def _render_call(call: ToolCall) -> str:
    return f"[{call.tool.value}] {call.argument}".rstrip()


def render_turns(
    question: str,
    toolset: Toolset | str,
    steps: Iterable[VisibleStep],
    notice: str | None = None,
) -> list[tuple[str, str, bool]]:
    """(role, content, negative) turns; see :func:`render_transcript`."""
    toolset = Toolset(toolset)
    turns: list[tuple[str, str, bool]] = [
        ("system", SYSTEM_PROMPTS[toolset], False),
        ("user", f"Question: {question}", False),
    ]
    for vs in steps:
        if isinstance(vs.action, ToolCall):
            turns.append(("assistant", _render_call(vs.action), vs.negative))
            if vs.obs is not None:
                after_finish = vs.action.tool is Tool.FINISH
                turns.append(("user", render_observation(vs.obs, after_finish), vs.negative))
        elif isinstance(vs.action, Decompose):
            turns.append(("assistant", render_action(vs.action), vs.negative))
            turns.append(("user", f"Sub-question: {vs.action.sub_question}", vs.negative))
        else:
            turns.append(("assistant", render_action(vs.action), vs.negative))
            turns.append(("user", "Returned to the previous question.", vs.negative))
    if notice:
        if turns[-1][0] == "user":
            role, content, neg = turns[-1]
            turns[-1] = (role, f"{content}\n\n{notice}", neg)
        else:
            turns.append(("user", notice, False))
    return turns


def render_transcript(ctx: PolicyContext) -> list[tuple[str, str]]:
    """System turn, the question, then alternating assistant/user turns."""
    return [
        (role, content)
        for role, content, _ in render_turns(
            ctx.episode_question, ctx.toolset, ctx.visible_steps, ctx.notice
        )
    ]


# -- policies -------------------------------------------------------------


class Policy(Protocol):
    def next_action(self, ctx: PolicyContext) -> Action: ...


class ScriptExhausted(RuntimeError):
    pass


class BackendError(RuntimeError):
    def __init__(self, status: int | None, note: str):
        super().__init__(f"backend error ({status}): {note}")
        self.status = status
        self.note = note


@dataclass
class ScriptedPolicy:
    script: list[Action]
    cursor: int = 0

    def next_action(self, ctx: PolicyContext) -> Action:
        if self.cursor >= len(self.script):
            raise ScriptExhausted(f"script of {len(self.script)} actions is used up")
        action = self.script[self.cursor]
        self.cursor += 1
        return action

    @classmethod
    def from_lines(cls, lines: Iterable[str], toolset: Toolset | str) -> ScriptedPolicy:
        return cls([parse_action(line, toolset) for line in lines if line.strip()])


class ReplayTransport(httpx.BaseTransport):
    """Serves canned chat-completion replies in order and records requests."""

    def __init__(self, replies: Sequence[str | dict[str, Any] | tuple[int, Any]]):
        self.replies = list(replies)
        self.requests: list[dict[str, Any]] = []

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        self.requests.append(json.loads(request.content or b"{}"))
        if not self.replies:
            return httpx.Response(500, json={"error": "no recorded reply left"})
        reply = self.replies.pop(0)
        if isinstance(reply, tuple):
            status, body = reply
            return httpx.Response(status, json=body)
        if isinstance(reply, str):
            reply = {"choices": [{"message": {"role": "assistant", "content": reply}}]}
        return httpx.Response(200, json=reply)


class ChatCompletionBackend:
    """Chat-completion HTTP client.

    POSTs ``{"model": ..., "messages": [...], **params}`` to ``url`` and reads
    ``choices[0].message.content``. Shareable across episodes; at most
    ``max_in_flight`` requests run at once.
    """

    def __init__(
        self,
        url: str,
        model: str,
        token: str | None = None,
        params: dict[str, Any] | None = None,
        max_in_flight: int = 4,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url
        self.model = model
        self.params = dict(params or {})
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def complete(self, messages: list[dict[str, str]]) -> str:
        payload = {"model": self.model, "messages": messages, **self.params}
        with self._slots:
            try:
                resp = self.client.post(self.url, json=payload)
            except httpx.HTTPError as exc:
                raise BackendError(None, str(exc)) from exc
        if resp.status_code >= 400:
            raise BackendError(resp.status_code, resp.text[:200])
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(resp.status_code, f"malformed completion: {exc}") from exc
        if not isinstance(content, str):
            raise BackendError(resp.status_code, "completion content is not text")
        return content


class UnconfiguredBackend:
    """Stand-in when no backend is configured; any call fails."""

    def complete(self, messages: list[dict[str, str]]) -> str:
        raise BackendError(None, "no chat backend configured (set backend.url)")


@dataclass
class LLMPolicy:
    backend: Any
    retries: int = DEFAULT_RETRIES
    calls: int = field(default=0, init=False)

    def next_action(self, ctx: PolicyContext) -> Action:
        messages = [{"role": r, "content": c} for r, c in render_transcript(ctx)]
        error: ParseError | None = None
        for _ in range(self.retries + 1):
            self.calls += 1
            text = self.backend.complete(messages)
            try:
                return parse_action(text, ctx.toolset)
            except ParseError as exc:
                error = exc
                log.info("unparseable policy output (%s); asking again", exc.reason)
                messages = messages + [
                    {"role": "assistant", "content": text},
                    {
                        "role": "user",
                        "content": f"No valid action found ({exc.reason}). Reply with one "
                        "line such as [Finish] <answer>.",
                    },
                ]
        assert error is not None
        raise error
