"""The decompose-and-query episode loop.

Each turn asks the policy for one action and applies it:

* ``[Decompose] q`` opens a child node for sub-question ``q``;
* a retriever call is budget-checked, dispatched and recorded; an empty
  result rolls back to the parent automatically;
* ``[Rollback]`` abandons the active sub-question;
* ``[Finish] a`` answers the active question, which either ends the
  episode (root) or hands ``a`` back to the parent as a sub-answer.

A dead end at the root, or a retrieval attempted with no budget left,
gives the policy one last turn to answer before the episode closes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

from dnq.grammar import Decompose, Invoke, Rollback, Toolset
from dnq.policy import Policy, PolicyContext, build_context
from dnq.qabase import QAStore
from dnq.trajectory import (
    MAX_ENTRIES_PER_CALL,
    RETRIEVERS,
    AtRoot,
    EmptyAnswer,
    ObsKind,
    Observation,
    Tool,
    ToolCall,
    Trajectory,
)
from dnq.wiki import PAGE_CHAR_CAP, WikiBackend, article_search, page_fetch

log = logging.getLogger(__name__)

BUDGET_NOTICE = "Retrieval budget exhausted. Answer now with [Finish] <answer>."
DEAD_END_NOTICE = (
    "Retrieval failed and there is no earlier question to return to. "
    "Answer now with [Finish] <answer>."
)
ABANDONED_NOTICE = "That sub-question was already abandoned. Choose a different action."


@dataclass
class Budget:
    max_retriever_calls: int = 10
    max_entries_per_call: int = MAX_ENTRIES_PER_CALL
    calls_used: int = 0
    entries_returned: int = 0

    @property
    def max_entries(self) -> int:
        return self.max_retriever_calls * self.max_entries_per_call

    @property
    def exhausted(self) -> bool:
        return self.calls_used >= self.max_retriever_calls

    def remaining(self) -> tuple[int, int]:
        return (
            self.max_retriever_calls - self.calls_used,
            self.max_entries - self.entries_returned,
        )

    def fresh(self) -> Budget:
        return replace(self, calls_used=0, entries_returned=0)


@dataclass(frozen=True)
class Limits:
    max_depth: int = 4
    max_steps: int = 25


class Termination(str, Enum):
    FINISHED = "Finished"
    BUDGET_EXHAUSTED = "BudgetExhausted"
    POLICY_FAILURE = "PolicyFailure"
    DEPTH_LIMIT = "DepthLimit"


@dataclass
class EpisodeResult:
    final_answer: str | None
    trajectory: Trajectory
    budget: Budget
    termination: Termination
    policy_calls: int = 0
    note: str | None = None


class UnknownTool(LookupError):
    pass


class BudgetExceeded(RuntimeError):
    pass


ToolFn = Callable[[str], Observation]


@dataclass
class ToolRegistry:
    toolset: Toolset
    tools: dict[Tool, ToolFn] = field(default_factory=dict)
    base: QAStore | None = None

    @classmethod
    def chitchat(cls, store: QAStore) -> ToolRegistry:
        return cls(
            Toolset.CHITCHAT,
            {
                Tool.QUESTION_RETRIEVER: store.question_retrieve,
                Tool.ANSWER_RETRIEVER: store.answer_retrieve,
            },
            base=store,
        )

    @classmethod
    def wiki(cls, backend: WikiBackend, page_char_cap: int = PAGE_CHAR_CAP) -> ToolRegistry:
        return cls(
            Toolset.WIKI,
            {
                Tool.ARTICLE_RETRIEVER: lambda q: article_search(backend, q),
                Tool.PAGE_RETRIEVER: lambda t: page_fetch(backend, t, page_char_cap),
            },
        )


def dispatch(call: ToolCall, registry: ToolRegistry, budget: Budget) -> tuple[Observation, Budget]:
    """Run one tool call, charging retriever calls to ``budget`` (updated in place).

    Tool failures come back as Error observations and still cost a call.
    """
    if call.tool is Tool.FINISH:
        return Observation.of_answer(call.argument), budget
    fn = registry.tools.get(call.tool)
    if fn is None or call.tool not in RETRIEVERS:
        raise UnknownTool(f"{call.tool.value} is not registered for {registry.toolset.value}")
    if budget.exhausted:
        raise BudgetExceeded(f"all {budget.max_retriever_calls} retriever calls are used")
    budget.calls_used += 1
    try:
        obs = fn(call.argument)
    except Exception as exc:  # a failing backend must not kill the episode
        log.warning("%s failed: %s", call.tool.value, exc)
        obs = Observation.error(f"{type(exc).__name__}: {exc}")
    if obs.kind is ObsKind.ENTRIES and len(obs.entries or ()) > budget.max_entries_per_call:
        log.warning(
            "%s returned %d entries; keeping %d",
            call.tool.value, len(obs.entries or ()), budget.max_entries_per_call,
        )
        obs = Observation.of_entries((obs.entries or ())[: budget.max_entries_per_call])
    if obs.kind is ObsKind.ENTRIES:
        budget.entries_returned += len(obs.entries or ())
    return obs, budget


class _Episode:
    def __init__(self, question: str, policy: Policy, registry: ToolRegistry,
                 budget: Budget, limits: Limits):
        self.traj = Trajectory(question)
        self.traj.toolset = registry.toolset.value
        self.policy = policy
        self.registry = registry
        self.budget = budget
        self.limits = limits
        self.interactions = 0

    def context(self, notice: str | None = None) -> PolicyContext:
        return build_context(self.traj, self.registry.toolset, self.budget.remaining(), notice)

    def end(self, termination: Termination, note: str | None = None) -> EpisodeResult:
        if self.traj.terminal:
            self.traj.termination = termination.value
        else:
            self.traj.abort(termination.value)
        if note:
            log.info("episode ended (%s): %s", termination.value, note)
        return EpisodeResult(
            final_answer=self.traj.final_answer or None,
            trajectory=self.traj,
            budget=self.budget,
            termination=termination,
            policy_calls=self.interactions,
            note=note,
        )

    def ask(self, notice: str | None = None):
        self.interactions += 1
        return self.policy.next_action(self.context(notice))

    def forced_finish(self, notice: str, termination: Termination | None) -> EpisodeResult:
        """One last policy turn to answer; ``termination=None`` means judge by the answer."""
        answer = ""
        note = notice
        if self.interactions < self.limits.max_steps:
            try:
                action = self.ask(notice)
            except Exception as exc:
                note = f"{notice} / policy failed: {exc}"
            else:
                if isinstance(action, Invoke) and action.call.tool is Tool.FINISH:
                    answer = action.call.argument
        self.traj.finish(answer, forced=True)
        if termination is None:
            termination = Termination.FINISHED if answer else Termination.POLICY_FAILURE
        return self.end(termination, note)

    def run(self) -> EpisodeResult:
        traj = self.traj
        if self.registry.toolset is Toolset.CHITCHAT and self.registry.base is not None:
            record = self.registry.base.lookup(traj.episode_question)
            if record is not None:
                traj.finish(record.aggregated_answer)
                return self.end(Termination.FINISHED, "answered from the QA base")

        notice: str | None = None
        while True:
            if self.interactions >= self.limits.max_steps:
                return self.end(Termination.DEPTH_LIMIT, "max_steps reached")
            try:
                action = self.ask(notice)
            except Exception as exc:
                return self.end(Termination.POLICY_FAILURE, f"{type(exc).__name__}: {exc}")
            notice = None

            if isinstance(action, Rollback):
                try:
                    traj.rollback()
                except AtRoot:
                    return self.forced_finish(DEAD_END_NOTICE, None)
                continue

            if isinstance(action, Decompose):
                if traj.depth() + 1 > self.limits.max_depth:
                    return self.end(Termination.DEPTH_LIMIT, "max_depth reached")
                if (Tool.DECOMPOSE, action.sub_question) in traj.attempted(traj.active_id):
                    notice = ABANDONED_NOTICE
                    continue
                traj.spawn_child(action.sub_question, self.budget)
                continue

            if not isinstance(action, Invoke):
                return self.end(Termination.POLICY_FAILURE, f"not an action: {action!r}")
            call = action.call
            if call.tool is Tool.FINISH:
                try:
                    traj.finish(call.argument)
                except EmptyAnswer as exc:
                    return self.end(Termination.POLICY_FAILURE, str(exc))
                if traj.terminal:
                    return self.end(Termination.FINISHED)
                continue

            if call.tool not in self.registry.tools:
                return self.end(
                    Termination.POLICY_FAILURE,
                    f"{call.tool.value} is not available in the {self.registry.toolset.value} toolset",
                )
            parent = traj.active.parent_id
            if parent is not None and (call.tool, call.argument) in traj.attempted(parent):
                traj.append_step(call, Observation.error("already tried in an abandoned branch"))
                continue
            try:
                obs, _ = dispatch(call, self.registry, self.budget)
            except BudgetExceeded:
                return self.forced_finish(BUDGET_NOTICE, Termination.BUDGET_EXHAUSTED)
            traj.append_step(call, obs)
            if obs.kind is ObsKind.EMPTY:
                try:
                    traj.rollback()
                except AtRoot:
                    return self.forced_finish(DEAD_END_NOTICE, None)


def run_episode(
    question: str,
    policy: Policy,
    tools: ToolRegistry,
    budget: Budget | None = None,
    limits: Limits = Limits(),
) -> EpisodeResult:
    """Run one episode to termination. Failures fold into ``termination``."""
    return _Episode(question, policy, tools, budget or Budget(), limits).run()
