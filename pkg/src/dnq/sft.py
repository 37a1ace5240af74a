"""Turn recorded trajectories into multi-turn SFT examples with per-turn loss masks.

Masks are at turn granularity; tokenization is left to the training stack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable

from dnq import SCHEMA_VERSION
from dnq.grammar import Toolset
from dnq.policy import render_turns, visible_steps
from dnq.trajectory import RETRIEVERS, Trajectory


class SFTMode(str, Enum):
    PER_ROUND = "per-round"
    SINGLE_SEQUENCE = "single"


class NonTerminalTrajectory(ValueError):
    pass


@dataclass(frozen=True)
class SFTTurn:
    role: str
    content: str
    train_on: bool

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.train_on and self.role != "assistant":
            raise ValueError("only assistant turns can be trained on")


@dataclass(frozen=True)
class SFTExample:
    turns: tuple[SFTTurn, ...]

    def trainable(self) -> list[SFTTurn]:
        return [t for t in self.turns if t.train_on]

    def to_dict(self) -> dict[str, Any]:
        return {
            "turns": [
                {"role": t.role, "content": t.content, "train_on": t.train_on} for t in self.turns
            ],
            "schema_version": SCHEMA_VERSION,
        }


def infer_toolset(traj: Trajectory, default: Toolset | str = Toolset.WIKI) -> Toolset:
    if traj.toolset:
        return Toolset(traj.toolset)
    for _, step in traj.all_steps():
        if step.call.tool in RETRIEVERS:
            for toolset in Toolset:
                if step.call.tool in toolset.tools:
                    return toolset
    return Toolset(default)


def export_sft(
    traj: Trajectory,
    mode: SFTMode | str = SFTMode.PER_ROUND,
    toolset: Toolset | str | None = None,
    include_exhausted: bool = False,
) -> list[SFTExample]:
    """SFT examples for one finished trajectory.

    PER_ROUND emits one example per trainable assistant turn k holding turns
    1..k with only turn k trainable; SINGLE_SEQUENCE emits the whole dialogue
    with every clean-path assistant turn trainable. With
    ``include_exhausted`` the abandoned branches are kept as context with
    ``train_on`` off.
    """
    if not traj.terminal:
        raise NonTerminalTrajectory("trajectory has not terminated")
    mode = SFTMode(mode)
    toolset = Toolset(toolset) if toolset else infer_toolset(traj)
    raw = render_turns(
        traj.episode_question, toolset, visible_steps(traj, include_exhausted=include_exhausted)
    )
    turns = [SFTTurn(role, content, role == "assistant" and not neg) for role, content, neg in raw]
    if mode is SFTMode.SINGLE_SEQUENCE:
        return [SFTExample(tuple(turns))]
    examples = []
    for k, turn in enumerate(turns):
        if turn.train_on:
            prefix = [SFTTurn(t.role, t.content, False) for t in turns[:k]]
            examples.append(SFTExample(tuple(prefix + [turn])))
    return examples


def write_sft(path, examples: Iterable[SFTExample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(json.dumps(example.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n
