"""Trajectory tree: sub-question nodes, tool-call history and rollback.

One node holds one sub-question and one step is one tool call. When a
child node finishes, its answer is recorded in the parent as a synthetic
``Decompose`` step (argument = sub-question, observation = sub-answer) and
control returns to the parent. Rolling back marks the active node
``Exhausted`` and returns to the parent without touching the parent's steps.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Iterator

from dnq import SCHEMA_VERSION


class Tool(str, Enum):
    QUESTION_RETRIEVER = "QuestionRetriever"
    ANSWER_RETRIEVER = "AnswerRetriever"
    ARTICLE_RETRIEVER = "ArticleRetriever"
    PAGE_RETRIEVER = "PageRetriever"
    FINISH = "Finish"
    # Synthetic: records a resolved sub-question in its parent. Never dispatched.
    DECOMPOSE = "Decompose"


# Most entries a single retriever call may return.
MAX_ENTRIES_PER_CALL = 5

RETRIEVERS = frozenset(
    {Tool.QUESTION_RETRIEVER, Tool.ANSWER_RETRIEVER, Tool.ARTICLE_RETRIEVER, Tool.PAGE_RETRIEVER}
)


class ObsKind(str, Enum):
    ENTRIES = "Entries"
    ANSWER = "Answer"
    EMPTY = "Empty"
    ERROR = "Error"


class NodeStatus(str, Enum):
    OPEN = "Open"
    EXHAUSTED = "Exhausted"
    FINISHED = "Finished"


class TrajectoryError(Exception):
    pass


class EmptyQuestion(TrajectoryError, ValueError):
    pass


class EmptyAnswer(TrajectoryError, ValueError):
    pass


class NodeClosed(TrajectoryError):
    pass


class AtRoot(TrajectoryError):
    pass


@dataclass(frozen=True)
class ToolCall:
    tool: Tool
    argument: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "tool", Tool(self.tool))
        if not isinstance(self.argument, str):
            raise TypeError("argument must be a string")
        # An empty Finish is legal only for budget aborts; Trajectory.finish polices that.
        if self.tool is not Tool.FINISH and not self.argument.strip():
            raise ValueError(f"{self.tool.value} needs a non-empty argument")


@dataclass(frozen=True)
class Observation:
    kind: ObsKind
    entries: tuple[tuple[str, str], ...] | None = None
    answer: str | None = None
    error_note: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ObsKind(self.kind))
        if self.kind is ObsKind.ENTRIES:
            if not self.entries:
                raise ValueError("Entries observation needs at least one entry")
            object.__setattr__(
                self, "entries", tuple((str(t), str(s)) for t, s in self.entries)
            )
        elif self.entries is not None:
            raise ValueError(f"{self.kind.value} observation carries no entries")
        if self.kind is ObsKind.ANSWER and self.answer is None:
            raise ValueError("Answer observation needs an answer")

    @classmethod
    def of_entries(cls, entries: Iterable[tuple[str, str]]) -> Observation:
        items = tuple(entries)
        return cls(ObsKind.ENTRIES, entries=items) if items else cls.empty()

    @classmethod
    def of_answer(cls, answer: str) -> Observation:
        return cls(ObsKind.ANSWER, answer=answer)

    @classmethod
    def empty(cls) -> Observation:
        return cls(ObsKind.EMPTY)

    @classmethod
    def error(cls, note: str) -> Observation:
        return cls(ObsKind.ERROR, error_note=note)

    def titles(self) -> list[str]:
        return [t for t, _ in self.entries or ()]

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "entries": [list(e) for e in self.entries] if self.entries is not None else None,
            "answer": self.answer,
            "error": self.error_note,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Observation:
        entries = data.get("entries")
        return cls(
            ObsKind(data["kind"]),
            entries=tuple((t, s) for t, s in entries) if entries is not None else None,
            answer=data.get("answer"),
            error_note=data.get("error"),
        )


@dataclass(frozen=True)
class Step:
    call: ToolCall
    obs: Observation

    def to_dict(self) -> dict[str, Any]:
        return {"tool": self.call.tool.value, "arg": self.call.argument, "obs": self.obs.to_dict()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Step:
        return cls(ToolCall(Tool(data["tool"]), data["arg"]), Observation.from_dict(data["obs"]))


def steps_hash(steps: Iterable[Step]) -> str:
    payload = json.dumps([s.to_dict() for s in steps], ensure_ascii=False, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class TrajectoryNode:
    node_id: int
    parent_id: int | None
    question: str
    steps: list[Step] = field(default_factory=list)
    status: NodeStatus = NodeStatus.OPEN
    # Number of parent steps at spawn time; orders children among the parent's steps.
    spawned_at: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.node_id,
            "parent": self.parent_id,
            "question": self.question,
            "status": self.status.value,
            "steps": [s.to_dict() for s in self.steps],
            "spawned_at": self.spawned_at,
        }


def _clean_question(text: str) -> str:
    if not isinstance(text, str) or not text.strip():
        raise EmptyQuestion("question is empty")
    return text.strip()


class Trajectory:
    """The search tree of one episode.

    Mutating methods act on the active node. After the episode ends
    (``terminal`` is true) every mutation raises :class:`NodeClosed`.
    """

    def __init__(self, question: str):
        question = _clean_question(question)
        self.episode_question = question
        self.nodes: dict[int, TrajectoryNode] = {0: TrajectoryNode(0, None, question)}
        self.active_id = 0
        self.budget_snapshots: dict[int, Any] = {}
        self.final_answer: str | None = None
        self.terminal = False
        self.termination: str | None = None
        self.toolset: str | None = None

    @property
    def root(self) -> TrajectoryNode:
        return self.nodes[0]

    @property
    def active(self) -> TrajectoryNode:
        return self.nodes[self.active_id]

    def _open_active(self) -> TrajectoryNode:
        node = self.active
        if self.terminal or node.status is not NodeStatus.OPEN:
            raise NodeClosed(f"node {node.node_id} is {node.status.value}")
        return node

    def append_step(self, call: ToolCall, obs: Observation) -> None:
        if call.tool is Tool.FINISH:
            raise ValueError("use finish() to append a Finish step")
        if call.tool is Tool.DECOMPOSE:
            raise ValueError("Decompose steps are recorded by finish() on a child")
        self._open_active().steps.append(Step(call, obs))

    def spawn_child(self, sub_question: str, budget: Any = None) -> TrajectoryNode:
        sub_question = _clean_question(sub_question)
        parent = self._open_active()
        child = TrajectoryNode(
            node_id=len(self.nodes),
            parent_id=parent.node_id,
            question=sub_question,
            spawned_at=len(parent.steps),
        )
        self.nodes[child.node_id] = child
        self.budget_snapshots[child.node_id] = copy.deepcopy(budget)
        self.active_id = child.node_id
        return child

    def rollback(self) -> TrajectoryNode:
        """Abandon the active node and make its parent active again."""
        node = self._open_active()
        if node.parent_id is None:
            raise AtRoot("cannot roll back past the root question")
        node.status = NodeStatus.EXHAUSTED
        self.active_id = node.parent_id
        return self.active

    def finish(self, answer: str, *, forced: bool = False) -> None:
        """Answer the active question.

        At the root (or when ``forced``) this ends the episode; in a child
        it lifts the sub-answer into the parent and returns there. Only a
        forced finish may carry an empty answer.
        """
        node = self._open_active()
        answer = answer.strip()
        if not answer and not forced:
            raise EmptyAnswer("an empty Finish is reserved for budget aborts")
        node.steps.append(Step(ToolCall(Tool.FINISH, answer), Observation.of_answer(answer)))
        node.status = NodeStatus.FINISHED
        if forced or node.parent_id is None:
            self.final_answer = answer
            self.terminal = True
            return
        parent = self.nodes[node.parent_id]
        parent.steps.append(
            Step(ToolCall(Tool.DECOMPOSE, node.question), Observation.of_answer(answer))
        )
        self.active_id = parent.node_id

    def abort(self, termination: str) -> None:
        self.terminal = True
        self.termination = termination

    @property
    def finished(self) -> bool:
        return self.terminal and self.final_answer is not None

    # -- structure queries ------------------------------------------------

    def ancestors(self, node_id: int) -> list[int]:
        """Ids from ``node_id`` up to the root. Raises on cycles or dangling links."""
        chain = [node_id]
        current = self.nodes[node_id]
        for _ in range(len(self.nodes)):
            if current.parent_id is None:
                return chain
            if current.parent_id not in self.nodes:
                raise TrajectoryError(f"node {current.node_id} has a dangling parent")
            current = self.nodes[current.parent_id]
            chain.append(current.node_id)
        raise TrajectoryError("parent chain does not reach the root")

    def depth(self, node_id: int | None = None) -> int:
        return len(self.ancestors(self.active_id if node_id is None else node_id)) - 1

    def children(self, node_id: int) -> list[TrajectoryNode]:
        return [n for n in self.nodes.values() if n.parent_id == node_id]

    def subtree(self, node_id: int) -> Iterator[TrajectoryNode]:
        yield self.nodes[node_id]
        for child in self.children(node_id):
            yield from self.subtree(child.node_id)

    def attempted(self, node_id: int) -> set[tuple[Tool, str]]:
        """(tool, argument) pairs already tried by exhausted children of ``node_id``.

        Includes the children's own sub-questions as ``Decompose`` pairs, so
        an abandoned sub-question is not spawned again.
        """
        seen: set[tuple[Tool, str]] = set()
        for child in self.children(node_id):
            if child.status is not NodeStatus.EXHAUSTED:
                continue
            seen.add((Tool.DECOMPOSE, child.question))
            for node in self.subtree(child.node_id):
                seen.update((s.call.tool, s.call.argument) for s in node.steps)
        return seen

    def all_steps(self) -> Iterator[tuple[int, Step]]:
        for node_id in sorted(self.nodes):
            for step in self.nodes[node_id].steps:
                yield node_id, step

    def retrieved_titles(self) -> list[str]:
        """Titles of every retrieved entry, abandoned branches included."""
        return [
            title
            for _, step in self.all_steps()
            if step.call.tool in RETRIEVERS
            for title in step.obs.titles()
        ]

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "question": self.episode_question,
            "final_answer": self.final_answer,
            "nodes": [self.nodes[i].to_dict() for i in sorted(self.nodes)],
            "active": self.active_id,
            "toolset": self.toolset,
            "termination": self.termination,
            "schema_version": SCHEMA_VERSION,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    def content_hash(self) -> str:
        data = self.to_dict()
        payload = {k: data[k] for k in ("question", "final_answer", "nodes")}
        blob = json.dumps(payload, ensure_ascii=False, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Trajectory:
        traj = cls(data["question"])
        traj.nodes = {}
        for raw in data["nodes"]:
            node = TrajectoryNode(
                node_id=int(raw["id"]),
                parent_id=raw["parent"],
                question=raw["question"],
                steps=[Step.from_dict(s) for s in raw["steps"]],
                status=NodeStatus(raw["status"]),
                spawned_at=raw.get("spawned_at"),
            )
            traj.nodes[node.node_id] = node
        roots = [n for n in traj.nodes.values() if n.parent_id is None]
        if len(roots) != 1 or 0 not in traj.nodes or traj.nodes[0].parent_id is not None:
            raise TrajectoryError("trajectory must have exactly one root with id 0")
        for node_id in traj.nodes:
            traj.ancestors(node_id)
        traj.final_answer = data.get("final_answer")
        traj.termination = data.get("termination")
        traj.terminal = traj.final_answer is not None or traj.termination is not None
        traj.toolset = data.get("toolset")
        active = data.get("active")
        if active is None or int(active) not in traj.nodes:
            raise TrajectoryError("trajectory names no valid active node")
        traj.active_id = int(active)
        return traj

    @classmethod
    def from_json(cls, line: str) -> Trajectory:
        return cls.from_dict(json.loads(line))


def new_trajectory(question: str) -> Trajectory:
    return Trajectory(question)


def read_trajectories(path) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return [Trajectory.from_json(line) for line in fh if line.strip()]


def write_trajectories(path, trajectories: Iterable[Trajectory], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(traj.to_json() + "\n")
